#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ddist/common.hpp"

// Reverse-mode autodiff over flat double arrays.
//
// The one structural choice that matters: backward passes are expressed as
// graph construction. gradients() walks the graph and emits *new* Tensor
// expressions for the adjoints, so the result of a gradient computation is
// itself differentiable. The WGAN-GP gradient penalty (a loss built from the
// gradient of the critic score w.r.t. its input) then trains with ordinary
// first-order machinery and no special casing.

namespace ddist {

using Arr = Eigen::ArrayXd;
using Shape = std::vector<int>;

inline int shape_size(const Shape& s) {
  int n = 1;
  for (int d : s) n *= d;
  return n;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

class Tensor;

struct Node {
  Shape shape;
  Arr value;
  bool requires_grad = false;
  std::vector<Tensor> inputs;
  // Returns one adjoint expression per input; entries whose need-flag is false
  // may be left as empty Tensors.
  std::function<std::vector<Tensor>(const Tensor& self, const Tensor& grad,
                                    const std::vector<char>& need)>
      vjp;
  std::uint64_t id = 0;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor constant(Shape shape, Arr value) {
    return make(std::move(shape), std::move(value), false);
  }
  static Tensor scalar(double v) {
    Arr a(1);
    a[0] = v;
    return constant({1}, std::move(a));
  }
  static Tensor zeros(Shape shape) {
    Arr a = Arr::Zero(shape_size(shape));
    return constant(std::move(shape), std::move(a));
  }
  static Tensor ones(Shape shape) {
    Arr a = Arr::Ones(shape_size(shape));
    return constant(std::move(shape), std::move(a));
  }
  // Trainable leaf.
  static Tensor param(Shape shape, Arr value) {
    return make(std::move(shape), std::move(value), true);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int size() const { return int(n_->value.size()); }
  const Arr& value() const { return n_->value; }
  Arr& raw() { return n_->value; }  // in-place update of leaves (optimizers)
  bool requires_grad() const { return n_->requires_grad; }
  Node* node() const { return n_.get(); }
  std::shared_ptr<Node> ptr() const { return n_; }

  double item() const {
    require(size() == 1, "tensor: item() on non-scalar");
    return n_->value[0];
  }

  static Tensor make(Shape shape, Arr value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    require(int(value.size()) == shape_size(shape), "tensor: shape/value size mismatch");
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->id = next_id();
    return Tensor(std::move(n));
  }

  static std::uint64_t next_id() {
    static std::uint64_t counter = 0;
    return ++counter;
  }

 private:
  std::shared_ptr<Node> n_;
};

namespace detail {

inline Tensor make_op(Shape shape, Arr value, std::vector<Tensor> inputs,
                      decltype(Node::vjp) vjp) {
  bool rg = false;
  for (const auto& t : inputs) rg = rg || t.requires_grad();
  Tensor t = Tensor::make(std::move(shape), std::move(value), rg);
  if (rg) {
    t.node()->inputs = std::move(inputs);
    t.node()->vjp = std::move(vjp);
  }
  return t;
}

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline CMatMap as_mat(const Tensor& t) {
  require(t.shape().size() == 2, "tensor: expected rank-2 tensor");
  return CMatMap(t.value().data(), t.shape()[0], t.shape()[1]);
}

}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  require(same_shape(a.shape(), b.shape()), "tensor: add shape mismatch");
  return detail::make_op(
      a.shape(), a.value() + b.value(), {a, b},
      [](const Tensor&, const Tensor& g, const std::vector<char>&) {
        return std::vector<Tensor>{g, g};
      });
}

inline Tensor neg(const Tensor& a);
inline Tensor mul(const Tensor& a, const Tensor& b);
inline Tensor divide(const Tensor& a, const Tensor& b);
inline Tensor mul_scalar(const Tensor& a, double s);

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require(same_shape(a.shape(), b.shape()), "tensor: sub shape mismatch");
  return detail::make_op(
      a.shape(), a.value() - b.value(), {a, b},
      [](const Tensor&, const Tensor& g, const std::vector<char>& need) {
        std::vector<Tensor> out(2);
        if (need[0]) out[0] = g;
        if (need[1]) out[1] = neg(g);
        return out;
      });
}

inline Tensor neg(const Tensor& a) {
  return detail::make_op(a.shape(), -a.value(), {a},
                         [](const Tensor&, const Tensor& g, const std::vector<char>&) {
                           return std::vector<Tensor>{neg(g)};
                         });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require(same_shape(a.shape(), b.shape()), "tensor: mul shape mismatch");
  return detail::make_op(
      a.shape(), a.value() * b.value(), {a, b},
      [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
        std::vector<Tensor> out(2);
        if (need[0]) out[0] = mul(g, self.node()->inputs[1]);
        if (need[1]) out[1] = mul(g, self.node()->inputs[0]);
        return out;
      });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
  require(same_shape(a.shape(), b.shape()), "tensor: div shape mismatch");
  return detail::make_op(
      a.shape(), a.value() / b.value(), {a, b},
      [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
        const Tensor& ta = self.node()->inputs[0];
        const Tensor& tb = self.node()->inputs[1];
        std::vector<Tensor> out(2);
        if (need[0]) out[0] = divide(g, tb);
        if (need[1]) out[1] = neg(divide(mul(g, ta), mul(tb, tb)));
        return out;
      });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::make_op(a.shape(), a.value() + s, {a},
                         [](const Tensor&, const Tensor& g, const std::vector<char>&) {
                           return std::vector<Tensor>{g};
                         });
}

inline Tensor mul_scalar(const Tensor& a, double s) {
  return detail::make_op(a.shape(), a.value() * s, {a},
                         [s](const Tensor&, const Tensor& g, const std::vector<char>&) {
                           return std::vector<Tensor>{mul_scalar(g, s)};
                         });
}

inline Tensor exp_t(const Tensor& a) {
  return detail::make_op(a.shape(), a.value().exp(), {a},
                         [](const Tensor& self, const Tensor& g, const std::vector<char>&) {
                           return std::vector<Tensor>{mul(g, exp_t(self.node()->inputs[0]))};
                         });
}

inline Tensor log_t(const Tensor& a) {
  return detail::make_op(a.shape(), a.value().log(), {a},
                         [](const Tensor& self, const Tensor& g, const std::vector<char>&) {
                           return std::vector<Tensor>{divide(g, self.node()->inputs[0])};
                         });
}

inline Tensor sqrt_t(const Tensor& a) {
  return detail::make_op(a.shape(), a.value().sqrt(), {a},
                         [](const Tensor& self, const Tensor& g, const std::vector<char>&) {
                           return std::vector<Tensor>{divide(
                               mul_scalar(g, 0.5), sqrt_t(self.node()->inputs[0]))};
                         });
}

// |x|; derivative taken as sign(x), zero at x == 0
inline Tensor abs_t(const Tensor& a) {
  Arr sign = a.value().sign();
  auto mask = std::make_shared<Arr>(std::move(sign));
  return detail::make_op(a.shape(), a.value().abs(), {a},
                         [mask](const Tensor& self, const Tensor& g, const std::vector<char>&) {
                           Tensor m = Tensor::constant(self.shape(), *mask);
                           return std::vector<Tensor>{mul(g, m)};
                         });
}

inline Tensor leaky_relu(const Tensor& a, double slope) {
  Arr mask = (a.value() > 0.0).select(Arr::Ones(a.size()), Arr::Constant(a.size(), slope));
  auto m = std::make_shared<Arr>(std::move(mask));
  return detail::make_op(a.shape(), a.value() * (*m), {a},
                         [m](const Tensor& self, const Tensor& g, const std::vector<char>&) {
                           Tensor mk = Tensor::constant(self.shape(), *m);
                           return std::vector<Tensor>{mul(g, mk)};
                         });
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
  Arr v = a.value().max(lo).min(hi);
  Arr mask = ((a.value() >= lo) && (a.value() <= hi))
                 .select(Arr::Ones(a.size()), Arr::Zero(a.size()));
  auto m = std::make_shared<Arr>(std::move(mask));
  return detail::make_op(a.shape(), std::move(v), {a},
                         [m](const Tensor& self, const Tensor& g, const std::vector<char>&) {
                           Tensor mk = Tensor::constant(self.shape(), *m);
                           return std::vector<Tensor>{mul(g, mk)};
                         });
}

inline Tensor min_scalar(const Tensor& a, double cap) {
  return clamp(a, -std::numeric_limits<double>::infinity(), cap);
}

// Value copy with no graph connection.
inline Tensor detach(const Tensor& a) { return Tensor::constant(a.shape(), a.value()); }

// ---- structure ----

inline Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_size(shape) == a.size(), "tensor: reshape size mismatch");
  Shape in_shape = a.shape();
  return detail::make_op(std::move(shape), a.value(), {a},
                         [in_shape](const Tensor&, const Tensor& g, const std::vector<char>&) {
                           return std::vector<Tensor>{reshape(g, in_shape)};
                         });
}

inline Tensor transpose(const Tensor& a) {
  require(a.shape().size() == 2, "tensor: transpose needs rank 2");
  int m = a.shape()[0], n = a.shape()[1];
  Arr out(a.size());
  detail::MatMap(out.data(), n, m) = detail::as_mat(a).transpose();
  return detail::make_op({n, m}, std::move(out), {a},
                         [](const Tensor&, const Tensor& g, const std::vector<char>&) {
                           return std::vector<Tensor>{transpose(g)};
                         });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2, "tensor: matmul needs rank 2");
  require(a.shape()[1] == b.shape()[0], "tensor: matmul inner dim mismatch");
  int m = a.shape()[0], n = b.shape()[1];
  Arr out(m * n);
  detail::MatMap(out.data(), m, n) = detail::as_mat(a) * detail::as_mat(b);
  return detail::make_op(
      {m, n}, std::move(out), {a, b},
      [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
        const Tensor& ta = self.node()->inputs[0];
        const Tensor& tb = self.node()->inputs[1];
        std::vector<Tensor> out(2);
        if (need[0]) out[0] = matmul(g, transpose(tb));
        if (need[1]) out[1] = matmul(transpose(ta), g);
        return out;
      });
}

inline Tensor sum(const Tensor& a);

// Broadcast a scalar to a full shape; adjoint of sum.
inline Tensor fill(const Tensor& s, Shape shape) {
  require(s.size() == 1, "tensor: fill needs scalar");
  Arr v = Arr::Constant(shape_size(shape), s.value()[0]);
  return detail::make_op(std::move(shape), std::move(v), {s},
                         [](const Tensor&, const Tensor& g, const std::vector<char>&) {
                           return std::vector<Tensor>{sum(g)};
                         });
}

inline Tensor sum(const Tensor& a) {
  Arr v(1);
  v[0] = a.value().sum();
  Shape in_shape = a.shape();
  return detail::make_op({1}, std::move(v), {a},
                         [in_shape](const Tensor&, const Tensor& g, const std::vector<char>&) {
                           return std::vector<Tensor>{fill(g, in_shape)};
                         });
}

inline Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / double(a.size())); }

// {m,1} -> {m,n}
inline Tensor tile_cols(const Tensor& a, int n) {
  require(a.shape().size() == 2 && a.shape()[1] == 1, "tensor: tile_cols needs {m,1}");
  int m = a.shape()[0];
  Arr out(m * n);
  detail::MatMap(out.data(), m, n).colwise() = detail::as_mat(a).col(0);
  return detail::make_op({m, n}, std::move(out), {a},
                         [n](const Tensor&, const Tensor& g, const std::vector<char>&) {
                           Tensor ones_n = Tensor::ones({n, 1});
                           return std::vector<Tensor>{matmul(g, ones_n)};
                         });
}

// {1,n} -> {m,n}
inline Tensor tile_rows(const Tensor& a, int m) {
  require(a.shape().size() == 2 && a.shape()[0] == 1, "tensor: tile_rows needs {1,n}");
  int n = a.shape()[1];
  Arr out(m * n);
  detail::MatMap(out.data(), m, n).rowwise() = detail::as_mat(a).row(0);
  return detail::make_op({m, n}, std::move(out), {a},
                         [m](const Tensor&, const Tensor& g, const std::vector<char>&) {
                           Tensor ones_m = Tensor::ones({1, m});
                           return std::vector<Tensor>{matmul(ones_m, g)};
                         });
}

// Index map shared between gather_pad and scatter_add. Entry -1 reads/writes
// a padding zero.
using IndexMap = std::shared_ptr<const std::vector<int>>;

inline IndexMap make_index_map(std::vector<int> idx) {
  return std::make_shared<const std::vector<int>>(std::move(idx));
}

inline Tensor scatter_add(const Tensor& a, const IndexMap& map, Shape out_shape);

// out[i] = map[i] >= 0 ? a[map[i]] : 0, |map| == size(out_shape)
inline Tensor gather_pad(const Tensor& a, const IndexMap& map, Shape out_shape) {
  require(int(map->size()) == shape_size(out_shape), "tensor: gather map size mismatch");
  Arr out(map->size());
  const Arr& src = a.value();
  for (std::size_t i = 0; i < map->size(); ++i) {
    int j = (*map)[i];
    out[long(i)] = j >= 0 ? src[j] : 0.0;
  }
  Shape in_shape = a.shape();
  return detail::make_op(std::move(out_shape), std::move(out), {a},
                         [map, in_shape](const Tensor&, const Tensor& g, const std::vector<char>&) {
                           return std::vector<Tensor>{scatter_add(g, map, in_shape)};
                         });
}

// out[map[i]] += a[i] for map[i] >= 0, |map| == size(a)
inline Tensor scatter_add(const Tensor& a, const IndexMap& map, Shape out_shape) {
  require(int(map->size()) == a.size(), "tensor: scatter map size mismatch");
  Arr out = Arr::Zero(shape_size(out_shape));
  const Arr& src = a.value();
  for (std::size_t i = 0; i < map->size(); ++i) {
    int j = (*map)[i];
    if (j >= 0) out[j] += src[long(i)];
  }
  Shape in_shape = a.shape();
  return detail::make_op(std::move(out_shape), std::move(out), {a},
                         [map, in_shape](const Tensor&, const Tensor& g, const std::vector<char>&) {
                           return std::vector<Tensor>{gather_pad(g, map, in_shape)};
                         });
}

// Stack rank-2 tensors with equal column counts along rows.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "tensor: concat_rows needs at least one part");
  int n = parts[0].shape()[1];
  int m = 0;
  for (const auto& p : parts) {
    require(p.shape().size() == 2 && p.shape()[1] == n, "tensor: concat_rows shape mismatch");
    m += p.shape()[0];
  }
  Arr out(m * n);
  int off = 0;
  for (const auto& p : parts) {
    out.segment(off, p.size()) = p.value();
    off += p.size();
  }
  std::vector<int> rows;
  for (const auto& p : parts) rows.push_back(p.shape()[0]);
  return detail::make_op(
      {m, n}, std::move(out), parts,
      [rows, n](const Tensor&, const Tensor& g, const std::vector<char>& need) {
        std::vector<Tensor> out(rows.size());
        int off = 0;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          int sz = rows[i] * n;
          if (need[i]) {
            std::vector<int> idx(sz);
            std::iota(idx.begin(), idx.end(), off);
            out[i] = gather_pad(g, make_index_map(std::move(idx)), {rows[i], n});
          }
          off += sz;
        }
        return out;
      });
}

// ---- reverse pass ----

// Adjoints of `loss` (scalar) with respect to each tensor in `wrt`, returned
// as differentiable expressions. Tensors in `wrt` that the loss does not
// depend on get zero adjoints.
inline std::vector<Tensor> gradients(const Tensor& loss, const std::vector<Tensor>& wrt) {
  require(loss.size() == 1, "tensor: gradients needs scalar loss");

  // postorder topo sort, inputs before consumers
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::unordered_map<Node*, Tensor> holder;  // keeps nodes alive by value
  {
    std::vector<std::pair<Tensor, std::size_t>> stack;
    stack.emplace_back(loss, 0);
    seen.insert(loss.node());
    while (!stack.empty()) {
      auto& [t, next] = stack.back();
      if (next < t.node()->inputs.size()) {
        Tensor in = t.node()->inputs[next++];
        if (in.requires_grad() && !seen.count(in.node())) {
          seen.insert(in.node());
          stack.emplace_back(in, 0);
        }
      } else {
        order.push_back(t.node());
        holder.emplace(t.node(), t);
        stack.pop_back();
      }
    }
  }

  std::unordered_set<Node*> targets;
  for (const auto& t : wrt) targets.insert(t.node());

  // needed: node leads to some wrt target
  std::unordered_set<Node*> needed;
  for (Node* n : order) {
    bool need = targets.count(n) > 0;
    if (!need)
      for (const auto& in : n->inputs)
        if (needed.count(in.node())) {
          need = true;
          break;
        }
    if (need) needed.insert(n);
  }

  std::unordered_map<Node*, Tensor> adjoint;
  adjoint.emplace(loss.node(), Tensor::ones({1}));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!needed.count(n) || !n->vjp) continue;
    auto adj_it = adjoint.find(n);
    if (adj_it == adjoint.end()) continue;
    std::vector<char> need_mask(n->inputs.size(), 0);
    bool any = false;
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      Node* in = n->inputs[i].node();
      need_mask[i] = n->inputs[i].requires_grad() && needed.count(in) ? 1 : 0;
      any = any || need_mask[i];
    }
    if (!any) continue;
    std::vector<Tensor> grads = n->vjp(holder.at(n), adj_it->second, need_mask);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      if (!need_mask[i] || !grads[i].defined()) continue;
      Node* in = n->inputs[i].node();
      auto cur = adjoint.find(in);
      if (cur == adjoint.end())
        adjoint.emplace(in, grads[i]);
      else
        cur->second = add(cur->second, grads[i]);
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& t : wrt) {
    auto it = adjoint.find(t.node());
    out.push_back(it != adjoint.end() ? it->second : Tensor::zeros(t.shape()));
  }
  return out;
}

}  // namespace ddist
