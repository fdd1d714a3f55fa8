#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "polarbev/autodiff.hpp"
#include "polarbev/rng.hpp"

namespace polarbev {

// Named parameter set. Creation order is remembered so that optimizer
// sweeps and checkpoint layout are deterministic.
class ParamStore {
 public:
  Var create(const std::string& name, std::vector<int64_t> shape) {
    if (by_name_.count(name)) throw std::invalid_argument("duplicate param: " + name);
    Var v = leaf(Tensor(std::move(shape)));
    by_name_[name] = v;
    order_.push_back(name);
    return v;
  }

  Var get(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("no such param: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return by_name_.count(name) != 0; }

  const std::vector<std::string>& names() const { return order_; }

  std::vector<Var> all() const {
    std::vector<Var> out;
    out.reserve(order_.size());
    for (const auto& n : order_) out.push_back(by_name_.at(n));
    return out;
  }

  int64_t count() const {
    int64_t n = 0;
    for (const auto& nm : order_) n += by_name_.at(nm)->val.numel();
    return n;
  }

  void zero_grads() {
    for (const auto& n : order_) by_name_.at(n)->zero_grad();
  }

  // name, shape rank, extents, raw little-endian fp64 payload
  void save(std::ostream& os) const {
    const uint64_t np = order_.size();
    write_u64(os, 0x50424556'30303031ULL);  // "PBEV0001"
    write_u64(os, np);
    for (const auto& nm : order_) {
      const Tensor& t = by_name_.at(nm)->val;
      write_u64(os, nm.size());
      os.write(nm.data(), static_cast<std::streamsize>(nm.size()));
      write_u64(os, t.shape.size());
      for (int64_t e : t.shape) write_u64(os, static_cast<uint64_t>(e));
      os.write(reinterpret_cast<const char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
  }

  void load(std::istream& is) {
    if (read_u64(is) != 0x50424556'30303031ULL)
      throw std::runtime_error("checkpoint: bad magic");
    const uint64_t np = read_u64(is);
    if (np != order_.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
    for (const auto& expect : order_) {
      std::string nm(read_u64(is), '\0');
      is.read(nm.data(), static_cast<std::streamsize>(nm.size()));
      if (nm != expect) throw std::runtime_error("checkpoint: parameter order mismatch at " + nm);
      Tensor& t = by_name_.at(nm)->val;
      const uint64_t rank = read_u64(is);
      if (rank != t.shape.size()) throw std::runtime_error("checkpoint: rank mismatch at " + nm);
      for (int64_t e : t.shape)
        if (read_u64(is) != static_cast<uint64_t>(e))
          throw std::runtime_error("checkpoint: extent mismatch at " + nm);
      is.read(reinterpret_cast<char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!is) throw std::runtime_error("checkpoint: truncated");
  }

 private:
  static void write_u64(std::ostream& os, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 8);
  }
  static uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
  }

  std::map<std::string, Var> by_name_;
  std::vector<std::string> order_;
};

// scaled Gaussian init for a [fan_in, fan_out] weight
inline void init_xavier(Tensor& t, Rng& rng) {
  double fan = t.shape.size() == 2
                   ? static_cast<double>(t.shape[0] + t.shape[1])
                   : static_cast<double>(t.numel());
  const double s = std::sqrt(2.0 / fan);
  for (auto& v : t.data) v = s * rng.gaussian();
}

// Adaptive-moment optimizer over a ParamStore.
class Adam {
 public:
  Adam(ParamStore& store, double lr = 1e-3, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : store_(store), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& nm : store.names()) {
      const Var& p = store.get(nm);
      m_.emplace_back(p->val.shape);
      v_.emplace_back(p->val.shape);
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    size_t pi = 0;
    for (const auto& nm : store_.names()) {
      Var p = store_.get(nm);
      Tensor& m = m_[pi];
      Tensor& v = v_[pi];
      ++pi;
      if (p->grad.data.empty()) continue;
      for (int64_t i = 0; i < p->val.numel(); ++i) {
        const double g = p->grad[i];
        m[i] = b1_ * m[i] + (1.0 - b1_) * g;
        v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
        p->val[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      }
    }
  }

 private:
  ParamStore& store_;
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace polarbev
