#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "moment2d/kernels.hpp"
#include "moment2d/rng.hpp"
#include "moment2d/tensor.hpp"

namespace m2d {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  std::vector<Var> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  /// True when gradient must flow into this node (a trainable leaf or any
  /// node downstream of one).
  bool requires_grad_path() const { return requires_grad; }
};

inline Tensor& ensure_grad(Node& n) {
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor::zeros(n.value.shape());
  return n.grad;
}

inline Var make_leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

inline Tensor uniform_tensor(std::vector<std::int64_t> shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

/// Named parameters plus their gradient buffers. Buffers (running statistics
/// and the like) are saved with checkpoints but never trained.
class ParamSet {
 public:
  Var add(const std::string& name, Tensor init, bool trainable = true) {
    if (params_.count(name)) throw std::invalid_argument("ParamSet: duplicate name " + name);
    Var v = make_leaf(std::move(init), trainable);
    params_[name] = v;
    if (!trainable) buffers_.insert(name);
    return v;
  }
  Var get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("ParamSet: unknown name " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return params_.count(name) != 0; }
  bool is_buffer(const std::string& name) const { return buffers_.count(name) != 0; }

  const std::map<std::string, Var>& all() const { return params_; }

  void zero_grads() {
    for (auto& [name, v] : params_)
      if (v->requires_grad && !v->grad.empty()) v->grad.fill(0.0);
  }

  std::int64_t trainable_size() const {
    std::int64_t n = 0;
    for (const auto& [name, v] : params_)
      if (v->requires_grad) n += v->value.size();
    return n;
  }

 private:
  std::map<std::string, Var> params_;
  std::set<std::string> buffers_;
};

/// Reverse-mode tape. Operations record a closure that routes the output
/// gradient to the parents; backward() replays the tape in reverse creation
/// order. With grad disabled, operations only compute values and intermediate
/// tensors are freed as soon as the last Var handle drops.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor v) { return make_leaf(std::move(v), false); }

  void backward(const Var& loss) {
    if (loss->value.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    ensure_grad(*loss).fill(1.0);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      Node& n = **it;
      if (n.backward && !n.grad.empty()) n.backward(n);
    }
  }

  void clear() { tape_.clear(); }
  std::size_t tape_size() const { return tape_.size(); }

  // ---- elementwise -------------------------------------------------------

  Var add(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "add");
    Tensor y = a->value;
    const double* bp = b->value.data();
    double* yp = y.data();
    for (std::int64_t i = 0; i < y.size(); ++i) yp[i] += bp[i];
    return record(std::move(y), {a, b}, [](Node& n) {
      for (int p = 0; p < 2; ++p) {
        Node& par = *n.parents[p];
        if (!par.requires_grad_path()) continue;
        Tensor& d = ensure_grad(par);
        for (std::int64_t i = 0; i < d.size(); ++i) d[i] += n.grad[i];
      }
    });
  }

  Var tanh(const Var& x) {
    Tensor y = x->value;
    double* yp = y.data();
    for (std::int64_t i = 0; i < y.size(); ++i) yp[i] = std::tanh(yp[i]);
    return record(std::move(y), {x}, [](Node& n) {
      Tensor& dx = ensure_grad(*n.parents[0]);
      const double* yv = n.value.data();
      for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += n.grad[i] * (1.0 - yv[i] * yv[i]);
    });
  }

  Var sigmoid(const Var& x) {
    Tensor y = x->value;
    double* yp = y.data();
    for (std::int64_t i = 0; i < y.size(); ++i) yp[i] = 1.0 / (1.0 + std::exp(-yp[i]));
    return record(std::move(y), {x}, [](Node& n) {
      Tensor& dx = ensure_grad(*n.parents[0]);
      const double* yv = n.value.data();
      for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += n.grad[i] * yv[i] * (1.0 - yv[i]);
    });
  }

  Var hadamard(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "hadamard");
    Tensor y = a->value;
    const double* bp = b->value.data();
    double* yp = y.data();
    for (std::int64_t i = 0; i < y.size(); ++i) yp[i] *= bp[i];
    return record(std::move(y), {a, b}, [](Node& n) {
      Node& a = *n.parents[0];
      Node& b = *n.parents[1];
      if (a.requires_grad_path()) {
        Tensor& da = ensure_grad(a);
        for (std::int64_t i = 0; i < da.size(); ++i) da[i] += n.grad[i] * b.value[i];
      }
      if (b.requires_grad_path()) {
        Tensor& db = ensure_grad(b);
        for (std::int64_t i = 0; i < db.size(); ++i) db[i] += n.grad[i] * a.value[i];
      }
    });
  }

  /// Per-row channel normalization: y = x / max(||x||, eps) over the last axis.
  Var l2norm_rows(const Var& x, double eps = 1e-8) {
    const std::int64_t c = x->value.last_dim();
    const std::int64_t rows = x->value.rows_flat();
    Tensor y = x->value;
    Tensor norms({rows});
    for (std::int64_t r = 0; r < rows; ++r) {
      double* row = y.data() + r * c;
      double s = 0.0;
      for (std::int64_t i = 0; i < c; ++i) s += row[i] * row[i];
      const double n = std::max(std::sqrt(s), eps);
      norms[r] = n;
      for (std::int64_t i = 0; i < c; ++i) row[i] /= n;
    }
    return record(std::move(y), {x}, [c, rows, norms = std::move(norms), eps](Node& n) {
      Tensor& dx = ensure_grad(*n.parents[0]);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* yr = n.value.data() + r * c;
        const double* gr = n.grad.data() + r * c;
        double* dr = dx.data() + r * c;
        const double nm = norms[r];
        if (nm > eps) {
          double dot = 0.0;
          for (std::int64_t i = 0; i < c; ++i) dot += yr[i] * gr[i];
          for (std::int64_t i = 0; i < c; ++i) dr[i] += (gr[i] - yr[i] * dot) / nm;
        } else {
          for (std::int64_t i = 0; i < c; ++i) dr[i] += gr[i] / nm;
        }
      }
    });
  }

  // ---- dense layers ------------------------------------------------------

  Var linear(const Var& x, const Var& w, const Var& b) {
    Tensor y = linear_forward(x->value, w->value, b ? &b->value : nullptr);
    std::vector<Var> parents{x, w};
    if (b) parents.push_back(b);
    return record(std::move(y), std::move(parents), [has_b = b != nullptr](Node& n) {
      Node& x = *n.parents[0];
      Node& w = *n.parents[1];
      Tensor* dxp = x.requires_grad_path() ? &ensure_grad(x) : nullptr;
      Tensor* dwp = w.requires_grad_path() ? &ensure_grad(w) : nullptr;
      Tensor* dbp = nullptr;
      if (has_b && n.parents[2]->requires_grad_path()) dbp = &ensure_grad(*n.parents[2]);
      linear_backward(x.value, w.value, n.grad, dxp, dwp, dbp);
    });
  }

  Var conv1d(const Var& x, const Var& w, const Var& b, std::int64_t stride = 1,
             std::int64_t dilation = 1, std::int64_t pad = 0) {
    Tensor y = conv1d_forward(x->value, w->value, b ? &b->value : nullptr, stride, dilation, pad);
    std::vector<Var> parents{x, w};
    if (b) parents.push_back(b);
    return record(std::move(y), std::move(parents),
                  [stride, dilation, pad, has_b = b != nullptr](Node& n) {
                    Node& x = *n.parents[0];
                    Node& w = *n.parents[1];
                    Tensor* dxp = x.requires_grad_path() ? &ensure_grad(x) : nullptr;
                    Tensor* dwp = w.requires_grad_path() ? &ensure_grad(w) : nullptr;
                    Tensor* dbp = nullptr;
                    if (has_b && n.parents[2]->requires_grad_path()) dbp = &ensure_grad(*n.parents[2]);
                    conv1d_backward(x.value, w.value, n.grad, stride, dilation, pad, dxp, dwp, dbp);
                  });
  }

  Var conv2d(const Var& x, const Var& w, const Var& b, std::int64_t stride = 1,
             std::int64_t dilation = 1, std::int64_t pad_h = 0, std::int64_t pad_w = 0) {
    Tensor y = conv2d_forward(x->value, w->value, b ? &b->value : nullptr, stride, dilation, pad_h,
                              pad_w);
    std::vector<Var> parents{x, w};
    if (b) parents.push_back(b);
    return record(std::move(y), std::move(parents),
                  [stride, dilation, pad_h, pad_w, has_b = b != nullptr](Node& n) {
                    Node& x = *n.parents[0];
                    Node& w = *n.parents[1];
                    Tensor* dxp = x.requires_grad_path() ? &ensure_grad(x) : nullptr;
                    Tensor* dwp = w.requires_grad_path() ? &ensure_grad(w) : nullptr;
                    Tensor* dbp = nullptr;
                    if (has_b && n.parents[2]->requires_grad_path()) dbp = &ensure_grad(*n.parents[2]);
                    conv2d_backward(x.value, w.value, n.grad, stride, dilation, pad_h, pad_w, dxp,
                                    dwp, dbp);
                  });
  }

  /// Gated convolution: tanh(conv(x; f)) * sigmoid(conv(x; g)).
  Var gated_conv2d(const Var& x, const Var& wf, const Var& bf, const Var& wg, const Var& bg,
                   std::int64_t pad_h, std::int64_t pad_w) {
    check_same_shape(wf->value, wg->value, "gated_conv2d");
    Var f = tanh(conv2d(x, wf, bf, 1, 1, pad_h, pad_w));
    Var g = sigmoid(conv2d(x, wg, bg, 1, 1, pad_h, pad_w));
    return hadamard(f, g);
  }

  // ---- normalization -----------------------------------------------------

  /// Batch normalization over the last (channel) axis; all leading axes form
  /// the batch. In train mode batch statistics are used and the running
  /// buffers are updated in place (momentum 0.1); eval mode requires
  /// initialized running statistics. eps = 1e-5.
  Var batch_norm(const Var& x, const Var& gamma, const Var& beta, const Var& run_mean,
                 const Var& run_var, const Var& run_count, bool train, double momentum = 0.1,
                 double eps = 1e-5) {
    const std::int64_t c = x->value.last_dim();
    const std::int64_t rows = x->value.rows_flat();
    if (gamma->value.size() != c || beta->value.size() != c)
      throw std::invalid_argument("batch_norm: gamma/beta must have one value per channel");
    Tensor mean({c}), invstd({c});
    if (train) {
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = x->value.data() + r * c;
        for (std::int64_t i = 0; i < c; ++i) mean[i] += row[i];
      }
      for (std::int64_t i = 0; i < c; ++i) mean[i] /= static_cast<double>(rows);
      Tensor var({c});
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = x->value.data() + r * c;
        for (std::int64_t i = 0; i < c; ++i) {
          const double d = row[i] - mean[i];
          var[i] += d * d;
        }
      }
      for (std::int64_t i = 0; i < c; ++i) var[i] /= static_cast<double>(rows);
      for (std::int64_t i = 0; i < c; ++i) invstd[i] = 1.0 / std::sqrt(var[i] + eps);
      // Fold batch statistics into the running buffers.
      const double unbias = rows > 1 ? static_cast<double>(rows) / static_cast<double>(rows - 1) : 1.0;
      for (std::int64_t i = 0; i < c; ++i) {
        run_mean->value[i] = (1.0 - momentum) * run_mean->value[i] + momentum * mean[i];
        run_var->value[i] = (1.0 - momentum) * run_var->value[i] + momentum * var[i] * unbias;
      }
      run_count->value[0] += 1.0;
    } else {
      if (run_count->value[0] == 0.0)
        throw std::runtime_error("batch_norm: eval mode with uninitialized running statistics");
      for (std::int64_t i = 0; i < c; ++i) {
        mean[i] = run_mean->value[i];
        invstd[i] = 1.0 / std::sqrt(run_var->value[i] + eps);
      }
    }
    Tensor y = x->value;
    Tensor xhat({rows, c});
    for (std::int64_t r = 0; r < rows; ++r) {
      double* row = y.data() + r * c;
      double* xh = xhat.data() + r * c;
      for (std::int64_t i = 0; i < c; ++i) {
        xh[i] = (row[i] - mean[i]) * invstd[i];
        row[i] = gamma->value[i] * xh[i] + beta->value[i];
      }
    }
    return record(std::move(y), {x, gamma, beta},
                  [rows, c, train, xhat = std::move(xhat), invstd = std::move(invstd)](Node& n) {
                    Node& x = *n.parents[0];
                    Node& gamma = *n.parents[1];
                    Node& beta = *n.parents[2];
                    Tensor dgam({c}), dbet({c});
                    for (std::int64_t r = 0; r < rows; ++r) {
                      const double* g = n.grad.data() + r * c;
                      const double* xh = xhat.data() + r * c;
                      for (std::int64_t i = 0; i < c; ++i) {
                        dgam[i] += g[i] * xh[i];
                        dbet[i] += g[i];
                      }
                    }
                    if (gamma.requires_grad_path()) {
                      Tensor& d = ensure_grad(gamma);
                      for (std::int64_t i = 0; i < c; ++i) d[i] += dgam[i];
                    }
                    if (beta.requires_grad_path()) {
                      Tensor& d = ensure_grad(beta);
                      for (std::int64_t i = 0; i < c; ++i) d[i] += dbet[i];
                    }
                    if (!x.requires_grad_path()) return;
                    Tensor& dx = ensure_grad(x);
                    if (train) {
                      const double inv_rows = 1.0 / static_cast<double>(rows);
                      for (std::int64_t r = 0; r < rows; ++r) {
                        const double* g = n.grad.data() + r * c;
                        const double* xh = xhat.data() + r * c;
                        double* d = dx.data() + r * c;
                        for (std::int64_t i = 0; i < c; ++i) {
                          const double gs = g[i] * gamma.value[i];
                          d[i] += invstd[i] * (gs - inv_rows * (dbet[i] * gamma.value[i] +
                                                                xh[i] * dgam[i] * gamma.value[i]));
                        }
                      }
                    } else {
                      for (std::int64_t r = 0; r < rows; ++r) {
                        const double* g = n.grad.data() + r * c;
                        double* d = dx.data() + r * c;
                        for (std::int64_t i = 0; i < c; ++i) d[i] += g[i] * gamma.value[i] * invstd[i];
                      }
                    }
                  });
  }

  // ---- lookup / shaping --------------------------------------------------

  Var embedding(const Var& table, const std::vector<int>& ids) {
    if (ids.empty()) throw std::invalid_argument("embedding: empty id list");
    const std::int64_t v = table->value.dim(0), d = table->value.dim(1);
    for (int id : ids)
      if (id < 0 || id >= v) throw std::invalid_argument("embedding: id out of range");
    Tensor y({static_cast<std::int64_t>(ids.size()), d});
    for (std::size_t t = 0; t < ids.size(); ++t)
      std::memcpy(y.data() + static_cast<std::int64_t>(t) * d, table->value.data() + ids[t] * d,
                  sizeof(double) * static_cast<std::size_t>(d));
    return record(std::move(y), {table}, [ids, d](Node& n) {
      Tensor& dt = ensure_grad(*n.parents[0]);
      for (std::size_t t = 0; t < ids.size(); ++t) {
        const double* g = n.grad.data() + static_cast<std::int64_t>(t) * d;
        double* row = dt.data() + ids[t] * d;
        for (std::int64_t i = 0; i < d; ++i) row[i] += g[i];
      }
    });
  }

  Var slice_rows(const Var& x, std::int64_t r0, std::int64_t count) {
    const std::int64_t c = x->value.last_dim();
    Tensor y({count, c});
    std::memcpy(y.data(), x->value.data() + r0 * c,
                sizeof(double) * static_cast<std::size_t>(count * c));
    return record(std::move(y), {x}, [r0, count, c](Node& n) {
      Tensor& dx = ensure_grad(*n.parents[0]);
      for (std::int64_t i = 0; i < count * c; ++i) dx[r0 * c + i] += n.grad[i];
    });
  }

  Var slice_cols(const Var& x, std::int64_t c0, std::int64_t count) {
    const std::int64_t c = x->value.last_dim();
    const std::int64_t rows = x->value.rows_flat();
    Tensor y({rows, count});
    for (std::int64_t r = 0; r < rows; ++r)
      std::memcpy(y.data() + r * count, x->value.data() + r * c + c0,
                  sizeof(double) * static_cast<std::size_t>(count));
    return record(std::move(y), {x}, [c0, count, c, rows](Node& n) {
      Tensor& dx = ensure_grad(*n.parents[0]);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < count; ++i) dx[r * c + c0 + i] += n.grad[r * count + i];
    });
  }

  Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty");
    const std::int64_t c = rows[0]->value.size();
    Tensor y({static_cast<std::int64_t>(rows.size()), c});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r]->value.size() != c) throw std::invalid_argument("stack_rows: ragged rows");
      std::memcpy(y.data() + static_cast<std::int64_t>(r) * c, rows[r]->value.data(),
                  sizeof(double) * static_cast<std::size_t>(c));
    }
    return record(std::move(y), rows, [c](Node& n) {
      for (std::size_t r = 0; r < n.parents.size(); ++r) {
        Node& p = *n.parents[r];
        if (!p.requires_grad_path()) continue;
        Tensor& d = ensure_grad(p);
        const double* g = n.grad.data() + static_cast<std::int64_t>(r) * c;
        for (std::int64_t i = 0; i < c; ++i) d[i] += g[i];
      }
    });
  }

  Var concat_cols(const Var& a, const Var& b) {
    const std::int64_t rows = a->value.dim(0);
    if (b->value.dim(0) != rows) throw std::invalid_argument("concat_cols: row mismatch");
    const std::int64_t ca = a->value.dim(1), cb = b->value.dim(1);
    Tensor y({rows, ca + cb});
    for (std::int64_t r = 0; r < rows; ++r) {
      std::memcpy(y.data() + r * (ca + cb), a->value.data() + r * ca,
                  sizeof(double) * static_cast<std::size_t>(ca));
      std::memcpy(y.data() + r * (ca + cb) + ca, b->value.data() + r * cb,
                  sizeof(double) * static_cast<std::size_t>(cb));
    }
    return record(std::move(y), {a, b}, [rows, ca, cb](Node& n) {
      Node& a = *n.parents[0];
      Node& b = *n.parents[1];
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* g = n.grad.data() + r * (ca + cb);
        if (a.requires_grad_path()) {
          Tensor& da = ensure_grad(a);
          for (std::int64_t i = 0; i < ca; ++i) da[r * ca + i] += g[i];
        }
        if (b.requires_grad_path()) {
          Tensor& db = ensure_grad(b);
          for (std::int64_t i = 0; i < cb; ++i) db[r * cb + i] += g[ca + i];
        }
      }
    });
  }

  Var reverse_rows(const Var& x) {
    const std::int64_t rows = x->value.dim(0), c = x->value.dim(1);
    Tensor y({rows, c});
    for (std::int64_t r = 0; r < rows; ++r)
      std::memcpy(y.data() + (rows - 1 - r) * c, x->value.data() + r * c,
                  sizeof(double) * static_cast<std::size_t>(c));
    return record(std::move(y), {x}, [rows, c](Node& n) {
      Tensor& dx = ensure_grad(*n.parents[0]);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < c; ++i) dx[r * c + i] += n.grad[(rows - 1 - r) * c + i];
    });
  }

  Var mean_rows(const Var& x) {
    const std::int64_t rows = x->value.dim(0), c = x->value.dim(1);
    Tensor y({1, c});
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t i = 0; i < c; ++i) y[i] += x->value[r * c + i];
    for (std::int64_t i = 0; i < c; ++i) y[i] /= static_cast<double>(rows);
    return record(std::move(y), {x}, [rows, c](Node& n) {
      Tensor& dx = ensure_grad(*n.parents[0]);
      const double inv = 1.0 / static_cast<double>(rows);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < c; ++i) dx[r * c + i] += n.grad[i] * inv;
    });
  }

  /// y[r, :] = x[r, :] * v[:], broadcasting a single row across all rows.
  Var broadcast_row_mul(const Var& x, const Var& v) {
    const std::int64_t c = x->value.last_dim();
    if (v->value.size() != c) throw std::invalid_argument("broadcast_row_mul: width mismatch");
    const std::int64_t rows = x->value.rows_flat();
    Tensor y = x->value;
    for (std::int64_t r = 0; r < rows; ++r) {
      double* row = y.data() + r * c;
      for (std::int64_t i = 0; i < c; ++i) row[i] *= v->value[i];
    }
    return record(std::move(y), {x, v}, [rows, c](Node& n) {
      Node& x = *n.parents[0];
      Node& v = *n.parents[1];
      if (x.requires_grad_path()) {
        Tensor& dx = ensure_grad(x);
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t i = 0; i < c; ++i) dx[r * c + i] += n.grad[r * c + i] * v.value[i];
      }
      if (v.requires_grad_path()) {
        Tensor& dv = ensure_grad(v);
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t i = 0; i < c; ++i) dv[i] += n.grad[r * c + i] * x.value[r * c + i];
      }
    });
  }

  /// Zeroes whole channel rows: mask has one value per leading position of x.
  Var mask_rows(const Var& x, Tensor mask) {
    const std::int64_t c = x->value.last_dim();
    const std::int64_t rows = x->value.rows_flat();
    if (mask.size() != rows) throw std::invalid_argument("mask_rows: mask/position mismatch");
    Tensor y = x->value;
    for (std::int64_t r = 0; r < rows; ++r) {
      if (mask[r] != 0.0) continue;
      double* row = y.data() + r * c;
      for (std::int64_t i = 0; i < c; ++i) row[i] = 0.0;
    }
    return record(std::move(y), {x}, [rows, c, mask = std::move(mask)](Node& n) {
      Tensor& dx = ensure_grad(*n.parents[0]);
      for (std::int64_t r = 0; r < rows; ++r) {
        if (mask[r] == 0.0) continue;
        const double* g = n.grad.data() + r * c;
        double* d = dx.data() + r * c;
        for (std::int64_t i = 0; i < c; ++i) d[i] += g[i];
      }
    });
  }

  // ---- reductions --------------------------------------------------------

  /// Scalar projection sum(x * w) with a fixed weight tensor; gradient-test helper.
  Var weighted_sum(const Var& x, Tensor w) {
    check_same_shape(x->value, w, "weighted_sum");
    double s = 0.0;
    for (std::int64_t i = 0; i < w.size(); ++i) s += x->value[i] * w[i];
    return record(Tensor::scalar(s), {x}, [w = std::move(w)](Node& n) {
      Tensor& dx = ensure_grad(*n.parents[0]);
      const double g = n.grad[0];
      for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += g * w[i];
    });
  }

  /// Mean binary cross entropy over the masked cells of one or more score
  /// maps. Scores are clamped to [1e-7, 1-1e-7] before the logs; the masks
  /// select valid candidates and the mean divides by their total count.
  Var masked_bce_mean(const std::vector<Var>& scores, std::vector<Tensor> labels,
                      std::vector<Tensor> masks) {
    if (scores.size() != labels.size() || scores.size() != masks.size() || scores.empty())
      throw std::invalid_argument("bce: need matching non-empty score/label/mask lists");
    double count = 0.0;
    for (std::size_t s = 0; s < scores.size(); ++s) {
      if (scores[s]->value.size() != labels[s].size() || labels[s].size() != masks[s].size())
        throw std::invalid_argument("bce: shape mismatch at scale " + std::to_string(s));
      for (std::int64_t i = 0; i < masks[s].size(); ++i) count += masks[s][i];
    }
    if (count <= 0.0) throw std::invalid_argument("bce: no valid candidates");
    constexpr double kClamp = 1e-7;
    double total = 0.0;
    for (std::size_t s = 0; s < scores.size(); ++s) {
      const Tensor& p = scores[s]->value;
      for (std::int64_t i = 0; i < p.size(); ++i) {
        if (masks[s][i] == 0.0) continue;
        const double pc = std::min(std::max(p[i], kClamp), 1.0 - kClamp);
        const double y = labels[s][i];
        total -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
      }
    }
    return record(Tensor::scalar(total / count), scores,
                  [labels = std::move(labels), masks = std::move(masks), count](Node& n) {
                    const double g = n.grad[0] / count;
                    for (std::size_t s = 0; s < n.parents.size(); ++s) {
                      Node& p = *n.parents[s];
                      if (!p.requires_grad_path()) continue;
                      Tensor& d = ensure_grad(p);
                      for (std::int64_t i = 0; i < d.size(); ++i) {
                        if (masks[s][i] == 0.0) continue;
                        const double pc = std::min(std::max(p.value[i], 1e-7), 1.0 - 1e-7);
                        d[i] += g * (pc - labels[s][i]) / std::max(pc * (1.0 - pc), 1e-12);
                      }
                    }
                  });
  }

  // ---- moment feature extraction ----------------------------------------

  /// Max pooling over clip spans onto a scale map: cell (i, j) covers clips
  /// [i*stride, i*stride + (j+1)*stride). Invalid cells stay exactly zero.
  Var span_max_grid(const Var& clips, std::int64_t stride, std::int64_t anchors, std::int64_t rows,
                    const Tensor& mask) {
    const std::int64_t n = clips->value.dim(0), c = clips->value.dim(1);
    Tensor y({rows, anchors, c});
    std::vector<std::int32_t> argmax(static_cast<std::size_t>(rows * anchors * c), -1);
    for (std::int64_t i = 0; i < rows; ++i) {
      for (std::int64_t j = 0; j < anchors; ++j) {
        if (mask[i * anchors + j] == 0.0) continue;
        const std::int64_t a = i * stride;
        const std::int64_t end = std::min(a + (j + 1) * stride, n);
        double* cell = y.data() + (i * anchors + j) * c;
        std::int32_t* am = argmax.data() + (i * anchors + j) * c;
        for (std::int64_t q = 0; q < c; ++q) {
          double best = clips->value[a * c + q];
          std::int32_t bi = static_cast<std::int32_t>(a);
          for (std::int64_t t = a + 1; t < end; ++t) {
            const double v = clips->value[t * c + q];
            if (v > best) {
              best = v;
              bi = static_cast<std::int32_t>(t);
            }
          }
          cell[q] = best;
          am[q] = bi;
        }
      }
    }
    return record(std::move(y), {clips}, [c, argmax = std::move(argmax)](Node& n) {
      Tensor& dx = ensure_grad(*n.parents[0]);
      for (std::size_t i = 0; i < argmax.size(); ++i) {
        const std::int32_t src = argmax[i];
        if (src < 0) continue;
        dx[src * c + static_cast<std::int64_t>(i % static_cast<std::size_t>(c))] += n.grad[static_cast<std::int64_t>(i)];
      }
    });
  }

  /// Mean over clip spans: row p of the output is the average of clips
  /// [spans[p].first, spans[p].first + spans[p].second).
  Var span_mean_rows(const Var& clips, std::vector<std::pair<std::int32_t, std::int32_t>> spans) {
    const std::int64_t n = clips->value.dim(0), c = clips->value.dim(1);
    Tensor y({static_cast<std::int64_t>(spans.size()), c});
    for (std::size_t p = 0; p < spans.size(); ++p) {
      const auto [start, len] = spans[p];
      if (start < 0 || len < 1 || start + len > n)
        throw std::invalid_argument("span_mean_rows: span outside clip range");
      double* row = y.data() + static_cast<std::int64_t>(p) * c;
      for (std::int32_t t = start; t < start + len; ++t) {
        const double* xr = clips->value.data() + static_cast<std::int64_t>(t) * c;
        for (std::int64_t q = 0; q < c; ++q) row[q] += xr[q];
      }
      for (std::int64_t q = 0; q < c; ++q) row[q] /= static_cast<double>(len);
    }
    return record(std::move(y), {clips}, [c, spans = std::move(spans)](Node& n) {
      Tensor& dx = ensure_grad(*n.parents[0]);
      for (std::size_t p = 0; p < spans.size(); ++p) {
        const auto [start, len] = spans[p];
        const double inv = 1.0 / static_cast<double>(len);
        const double* g = n.grad.data() + static_cast<std::int64_t>(p) * c;
        for (std::int32_t t = start; t < start + len; ++t) {
          double* d = dx.data() + static_cast<std::int64_t>(t) * c;
          for (std::int64_t q = 0; q < c; ++q) d[q] += g[q] * inv;
        }
      }
    });
  }

  /// Routes rows of several source tensors into a [rows, anchors, c] map.
  /// refs holds (source index, source row) per cell, or (-1, -1) for cells
  /// that stay zero.
  Var assemble_map(const std::vector<Var>& sources,
                   std::vector<std::pair<std::int32_t, std::int32_t>> refs, std::int64_t rows,
                   std::int64_t anchors) {
    if (sources.empty()) throw std::invalid_argument("assemble_map: no sources");
    const std::int64_t c = sources[0]->value.last_dim();
    Tensor y({rows, anchors, c});
    for (std::int64_t cell = 0; cell < rows * anchors; ++cell) {
      const auto [src, row] = refs[static_cast<std::size_t>(cell)];
      if (src < 0) continue;
      std::memcpy(y.data() + cell * c, sources[static_cast<std::size_t>(src)]->value.data() + row * c,
                  sizeof(double) * static_cast<std::size_t>(c));
    }
    return record(std::move(y), sources, [c, refs = std::move(refs)](Node& n) {
      for (std::size_t cell = 0; cell < refs.size(); ++cell) {
        const auto [src, row] = refs[cell];
        if (src < 0) continue;
        Node& p = *n.parents[static_cast<std::size_t>(src)];
        if (!p.requires_grad_path()) continue;
        Tensor& d = ensure_grad(p);
        const double* g = n.grad.data() + static_cast<std::int64_t>(cell) * c;
        for (std::int64_t i = 0; i < c; ++i) d[row * c + i] += g[i];
      }
    });
  }

 private:
  Var record(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    n->requires_grad = needs;
    if (grad_enabled_ && needs) {
      n->parents = std::move(parents);
      n->backward = std::move(backward);
      tape_.push_back(n);
    }
    return n;
  }

  bool grad_enabled_ = true;
  std::vector<Var> tape_;
};

}  // namespace m2d
