#include "kbdistill/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "kbdistill/errors.hpp"

namespace kbd {

Param& ParamStore::add(std::string name, std::size_t rows, std::size_t cols) {
  if (find(name) != nullptr) throw ContractViolation("duplicate parameter: " + name);
  auto p = std::make_unique<Param>();
  p->name = std::move(name);
  p->rows = rows;
  p->cols = cols;
  p->id = params_.size();
  p->value.assign(rows * cols, 0.0);
  params_.push_back(std::move(p));
  return *params_.back();
}

Param* ParamStore::find(std::string_view name) {
  for (auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

const Param* ParamStore::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

std::size_t ParamStore::total_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->size();
  return n;
}

GradBuffer::GradBuffer(const ParamStore& store) {
  grads_.resize(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) grads_[i].assign(store[i].size(), 0.0);
}

void GradBuffer::zero() {
  for (auto& g : grads_) std::fill(g.begin(), g.end(), 0.0);
}

void GradBuffer::add(const GradBuffer& other) {
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    auto& dst = grads_[i];
    const auto& src = other.grads_[i];
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

void GradBuffer::scale(Real s) {
  for (auto& g : grads_) {
    for (auto& x : g) x *= s;
  }
}

Real GradBuffer::norm() const {
  Real acc = 0.0;
  for (const auto& g : grads_) {
    for (Real x : g) acc += x * x;
  }
  return std::sqrt(acc);
}

Tape::Tape(GradBuffer* grads, Exec exec) : grads_(grads), exec_(exec) { nodes_.reserve(256); }

Vec& Tape::grad(Var v) {
  auto& n = nodes_[v.id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

Var Tape::push(Vec value, const char* op, Backward back) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  if (recording()) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Vec v) { return push(std::move(v), "constant", nullptr); }

Var Tape::scalar_constant(Real x) { return push(Vec{x}, "constant", nullptr); }

Var Tape::embed(const Param& table, std::size_t row) {
  if (row >= table.rows) throw ContractViolation("embedding row out of range in " + table.name);
  Vec out(table.row(row), table.row(row) + table.cols);
  const Param* t = &table;
  return push(std::move(out), "embed", [t, row](Tape& tape, const Vec& g) {
    Real* dst = tape.param_grad(*t).data() + row * t->cols;
    for (std::size_t k = 0; k < t->cols; ++k) dst[k] += g[k];
  });
}

Var Tape::affine(const Param& w, Var x, const Param* bias) {
  if (size(x) != w.cols) throw ContractViolation("affine shape mismatch in " + w.name);
  Vec out(w.rows);
  kernels::gemv(exec_, w.value.data(), w.rows, w.cols, value(x).data(), out.data());
  if (bias != nullptr) {
    for (std::size_t r = 0; r < w.rows; ++r) out[r] += bias->value[r];
  }
  const Param* wp = &w;
  return push(std::move(out), "affine", [wp, x, bias](Tape& t, const Vec& g) {
    const Vec& xv = t.value(x);
    kernels::ger_acc(t.exec(), t.param_grad(*wp).data(), wp->rows, wp->cols, g.data(), xv.data());
    kernels::gemv_t_acc(t.exec(), wp->value.data(), wp->rows, wp->cols, g.data(), t.grad(x).data());
    if (bias != nullptr) {
      Vec& gb = t.param_grad(*bias);
      for (std::size_t r = 0; r < wp->rows; ++r) gb[r] += g[r];
    }
  });
}

Var Tape::affine_rows(const Param& w, Var rows) {
  const std::size_t n = size(rows) / w.cols;
  if (n * w.cols != size(rows)) throw ContractViolation("affine_rows shape mismatch in " + w.name);
  Vec out(n * w.rows);
  const Vec& in = value(rows);
  for (std::size_t k = 0; k < n; ++k) {
    kernels::gemv(exec_, w.value.data(), w.rows, w.cols, in.data() + k * w.cols,
                  out.data() + k * w.rows);
  }
  const Param* wp = &w;
  return push(std::move(out), "affine_rows", [wp, rows, n](Tape& t, const Vec& g) {
    const Vec& xv = t.value(rows);
    Vec& gx = t.grad(rows);
    Vec& gw = t.param_grad(*wp);
    for (std::size_t k = 0; k < n; ++k) {
      kernels::ger_acc(t.exec(), gw.data(), wp->rows, wp->cols, g.data() + k * wp->rows,
                       xv.data() + k * wp->cols);
      kernels::gemv_t_acc(t.exec(), wp->value.data(), wp->rows, wp->cols,
                          g.data() + k * wp->rows, gx.data() + k * wp->cols);
    }
  });
}

Var Tape::add(Var a, Var b) {
  const Vec& av = value(a);
  const Vec& bv = value(b);
  if (av.size() != bv.size()) throw ContractViolation("add shape mismatch");
  Vec out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return push(std::move(out), "add", [a, b](Tape& t, const Vec& g) {
    Vec& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    Vec& gb = t.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

Var Tape::sub(Var a, Var b) {
  const Vec& av = value(a);
  const Vec& bv = value(b);
  if (av.size() != bv.size()) throw ContractViolation("sub shape mismatch");
  Vec out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return push(std::move(out), "sub", [a, b](Tape& t, const Vec& g) {
    Vec& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    Vec& gb = t.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

Var Tape::mul(Var a, Var b) {
  const Vec& av = value(a);
  const Vec& bv = value(b);
  if (av.size() != bv.size()) throw ContractViolation("mul shape mismatch");
  Vec out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return push(std::move(out), "mul", [a, b](Tape& t, const Vec& g) {
    const Vec& av = t.value(a);
    const Vec& bv = t.value(b);
    Vec& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    Vec& gb = t.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
  });
}

Var Tape::scale(Var a, Var s) {
  if (size(s) != 1) throw ContractViolation("scale expects a scalar factor");
  const Vec& av = value(a);
  const Real sv = scalar(s);
  Vec out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * sv;
  return push(std::move(out), "scale", [a, s](Tape& t, const Vec& g) {
    const Vec& av = t.value(a);
    const Real sv = t.scalar(s);
    Vec& ga = t.grad(a);
    Real gs = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * sv;
      gs += g[i] * av[i];
    }
    t.grad(s)[0] += gs;
  });
}

Var Tape::one_minus(Var a) {
  Vec out = value(a);
  for (auto& x : out) x = 1.0 - x;
  return push(std::move(out), "one_minus", [a](Tape& t, const Vec& g) {
    Vec& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
  });
}

Var Tape::tanh(Var a) {
  Vec out = value(a);
  for (auto& x : out) x = std::tanh(x);
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), "tanh", [a, self](Tape& t, const Vec& g) {
    const Vec& y = t.value(self);
    Vec& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var Tape::sigmoid(Var a) {
  Vec out = value(a);
  for (auto& x : out) x = 1.0 / (1.0 + std::exp(-x));
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), "sigmoid", [a, self](Tape& t, const Vec& g) {
    const Vec& y = t.value(self);
    Vec& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var Tape::concat(std::span<const Var> parts) {
  Vec out;
  std::vector<std::pair<Var, std::size_t>> layout;
  for (Var p : parts) {
    layout.emplace_back(p, out.size());
    const Vec& v = value(p);
    out.insert(out.end(), v.begin(), v.end());
  }
  return push(std::move(out), "concat", [layout = std::move(layout)](Tape& t, const Vec& g) {
    for (const auto& [p, offset] : layout) {
      Vec& gp = t.grad(p);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
    }
  });
}

Var Tape::dot(Var a, Var b) {
  const Vec& av = value(a);
  const Vec& bv = value(b);
  if (av.size() != bv.size()) throw ContractViolation("dot shape mismatch");
  Real acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  return push(Vec{acc}, "dot", [a, b](Tape& t, const Vec& g) {
    const Vec& av = t.value(a);
    const Vec& bv = t.value(b);
    Vec& ga = t.grad(a);
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g[0] * bv[i];
    Vec& gb = t.grad(b);
    for (std::size_t i = 0; i < bv.size(); ++i) gb[i] += g[0] * av[i];
  });
}

Var Tape::sum(Var a) {
  Real acc = 0.0;
  for (Real x : value(a)) acc += x;
  return push(Vec{acc}, "sum", [a](Tape& t, const Vec& g) {
    Vec& ga = t.grad(a);
    for (auto& x : ga) x += g[0];
  });
}

Var Tape::softmax(Var a) {
  const Vec& av = value(a);
  if (av.empty()) throw ContractViolation("softmax of empty vector");
  const Real mx = *std::max_element(av.begin(), av.end());
  Vec out(av.size());
  Real z = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = std::exp(av[i] - mx);
    z += out[i];
  }
  for (auto& x : out) x /= z;
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), "softmax", [a, self](Tape& t, const Vec& g) {
    const Vec& y = t.value(self);
    Real inner = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) inner += g[i] * y[i];
    Vec& ga = t.grad(a);
    for (std::size_t i = 0; i < y.size(); ++i) ga[i] += y[i] * (g[i] - inner);
  });
}

Var Tape::log_clamped(Var a, Real eps) {
  Vec out = value(a);
  for (auto& x : out) x = std::log(std::max(x, eps));
  return push(std::move(out), "log", [a, eps](Tape& t, const Vec& g) {
    const Vec& av = t.value(a);
    Vec& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > eps) ga[i] += g[i] / av[i];
    }
  });
}

Var Tape::gather(Var a, std::vector<std::uint32_t> idx) {
  const Vec& av = value(a);
  Vec out(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= av.size()) throw ContractViolation("gather index out of range");
    out[k] = av[idx[k]];
  }
  return push(std::move(out), "gather", [a, idx = std::move(idx)](Tape& t, const Vec& g) {
    Vec& ga = t.grad(a);
    for (std::size_t k = 0; k < idx.size(); ++k) ga[idx[k]] += g[k];
  });
}

Var Tape::normalize(Var a) {
  const Vec& av = value(a);
  Real s = 0.0;
  for (Real x : av) s += x;
  if (!std::isfinite(s) || s == 0.0) throw NumericError("normalize of zero or non-finite mass");
  if (s < 0.0) throw ContractViolation("normalize of negative mass");
  Vec out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / s;
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), "normalize", [a, self, s](Tape& t, const Vec& g) {
    const Vec& y = t.value(self);
    Real inner = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) inner += g[i] * y[i];
    Vec& ga = t.grad(a);
    for (std::size_t i = 0; i < y.size(); ++i) ga[i] += (g[i] - inner) / s;
  });
}

Var Tape::weighted_rows(Var weights, Var rows, std::size_t width) {
  const Vec& w = value(weights);
  const Vec& r = value(rows);
  if (w.size() * width != r.size()) throw ContractViolation("weighted_rows shape mismatch");
  Vec out(width, 0.0);
  for (std::size_t k = 0; k < w.size(); ++k) {
    for (std::size_t i = 0; i < width; ++i) out[i] += w[k] * r[k * width + i];
  }
  return push(std::move(out), "weighted_rows", [weights, rows, width](Tape& t, const Vec& g) {
    const Vec& w = t.value(weights);
    const Vec& r = t.value(rows);
    Vec& gw = t.grad(weights);
    Vec& gr = t.grad(rows);
    for (std::size_t k = 0; k < w.size(); ++k) {
      Real acc = 0.0;
      for (std::size_t i = 0; i < width; ++i) {
        acc += g[i] * r[k * width + i];
        gr[k * width + i] += w[k] * g[i];
      }
      gw[k] += acc;
    }
  });
}

Var Tape::attention_scores(Var keys, Var query, const Param& v) {
  const Vec& kv = value(keys);
  const Vec& qv = value(query);
  const std::size_t width = qv.size();
  if (v.size() != width || kv.size() % width != 0) {
    throw ContractViolation("attention_scores shape mismatch in " + v.name);
  }
  const std::size_t n = kv.size() / width;
  Vec act(kv.size());
  Vec out(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < width; ++i) {
      const Real a = std::tanh(kv[k * width + i] + qv[i]);
      act[k * width + i] = a;
      out[k] += v.value[i] * a;
    }
  }
  const Param* vp = &v;
  return push(std::move(out), "attention",
              [keys, query, vp, width, n, act = std::move(act)](Tape& t, const Vec& g) {
                Vec& gk = t.grad(keys);
                Vec& gq = t.grad(query);
                Vec& gv = t.param_grad(*vp);
                for (std::size_t k = 0; k < n; ++k) {
                  for (std::size_t i = 0; i < width; ++i) {
                    const Real a = act[k * width + i];
                    gv[i] += g[k] * a;
                    const Real pre = g[k] * vp->value[i] * (1.0 - a * a);
                    gk[k * width + i] += pre;
                    gq[i] += pre;
                  }
                }
              });
}

Var Tape::rows_dot(Var rows, Var v) {
  const Vec& r = value(rows);
  const Vec& vv = value(v);
  const std::size_t width = vv.size();
  if (width == 0 || r.size() % width != 0) throw ContractViolation("rows_dot shape mismatch");
  const std::size_t n = r.size() / width;
  Vec out(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < width; ++i) out[k] += r[k * width + i] * vv[i];
  }
  return push(std::move(out), "rows_dot", [rows, v, width, n](Tape& t, const Vec& g) {
    const Vec& r = t.value(rows);
    const Vec& vv = t.value(v);
    Vec& gr = t.grad(rows);
    Vec& gv = t.grad(v);
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t i = 0; i < width; ++i) {
        gr[k * width + i] += g[k] * vv[i];
        gv[i] += g[k] * r[k * width + i];
      }
    }
  });
}

Var Tape::segment_sum(Var a, std::vector<std::uint32_t> segment, std::size_t segments) {
  const Vec& av = value(a);
  if (segment.size() != av.size()) throw ContractViolation("segment_sum shape mismatch");
  Vec out(segments, 0.0);
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (segment[i] >= segments) throw ContractViolation("segment_sum index out of range");
    out[segment[i]] += av[i];
  }
  return push(std::move(out), "segment_sum", [a, segment = std::move(segment)](Tape& t, const Vec& g) {
    Vec& ga = t.grad(a);
    for (std::size_t i = 0; i < segment.size(); ++i) ga[i] += g[segment[i]];
  });
}

Var Tape::add_to_rows(Var rows, Var row) {
  const Vec& r = value(rows);
  const Vec& v = value(row);
  const std::size_t width = v.size();
  if (width == 0 || r.size() % width != 0) throw ContractViolation("add_to_rows shape mismatch");
  Vec out = r;
  for (std::size_t k = 0; k < r.size(); ++k) out[k] += v[k % width];
  return push(std::move(out), "add_to_rows", [rows, row, width](Tape& t, const Vec& g) {
    Vec& gr = t.grad(rows);
    Vec& gv = t.grad(row);
    for (std::size_t k = 0; k < g.size(); ++k) {
      gr[k] += g[k];
      gv[k % width] += g[k];
    }
  });
}

Var Tape::dropout(Var a, Real rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return a;
  const Vec& av = value(a);
  std::bernoulli_distribution keep(1.0 - rate);
  const Real inv = 1.0 / (1.0 - rate);
  Vec mask(av.size());
  Vec out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    mask[i] = keep(rng) ? inv : 0.0;
    out[i] = av[i] * mask[i];
  }
  return push(std::move(out), "dropout", [a, mask = std::move(mask)](Tape& t, const Vec& g) {
    Vec& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
}

Var Tape::gru(const GruParams& p, Var x, Var h) {
  const std::size_t hd = p.hidden;
  const Vec& xv = value(x);
  const Vec& hv = value(h);
  if (hv.size() != hd || xv.size() != p.wx->cols) throw ContractViolation("gru shape mismatch");
  Vec gx(3 * hd), gh(3 * hd);
  kernels::gemv(exec_, p.wx->value.data(), 3 * hd, p.wx->cols, xv.data(), gx.data());
  kernels::gemv(exec_, p.wh->value.data(), 3 * hd, hd, hv.data(), gh.data());
  for (std::size_t i = 0; i < 3 * hd; ++i) {
    gx[i] += p.bx->value[i];
    gh[i] += p.bh->value[i];
  }
  // cache: r, z, n, (Wh_n h + bh_n)
  Vec cache(4 * hd);
  Vec out(hd);
  for (std::size_t i = 0; i < hd; ++i) {
    const Real r = 1.0 / (1.0 + std::exp(-(gx[i] + gh[i])));
    const Real z = 1.0 / (1.0 + std::exp(-(gx[hd + i] + gh[hd + i])));
    const Real hn = gh[2 * hd + i];
    const Real n = std::tanh(gx[2 * hd + i] + r * hn);
    cache[i] = r;
    cache[hd + i] = z;
    cache[2 * hd + i] = n;
    cache[3 * hd + i] = hn;
    out[i] = (1.0 - z) * n + z * hv[i];
  }
  return push(std::move(out), "gru", [p, x, h, cache = std::move(cache)](Tape& t, const Vec& g) {
    const std::size_t hd = p.hidden;
    const Vec& xv = t.value(x);
    const Vec& hv = t.value(h);
    Vec ax(3 * hd), ah(3 * hd);
    Vec gh_direct(hd);
    for (std::size_t i = 0; i < hd; ++i) {
      const Real r = cache[i], z = cache[hd + i], n = cache[2 * hd + i], hn = cache[3 * hd + i];
      const Real gn = g[i] * (1.0 - z);
      const Real gz = g[i] * (hv[i] - n);
      gh_direct[i] = g[i] * z;
      const Real an = gn * (1.0 - n * n);
      const Real ar = an * hn * r * (1.0 - r);
      const Real az = gz * z * (1.0 - z);
      ax[i] = ar;
      ax[hd + i] = az;
      ax[2 * hd + i] = an;
      ah[i] = ar;
      ah[hd + i] = az;
      ah[2 * hd + i] = an * r;
    }
    const Exec e = t.exec();
    kernels::ger_acc(e, t.param_grad(*p.wx).data(), 3 * hd, p.wx->cols, ax.data(), xv.data());
    kernels::ger_acc(e, t.param_grad(*p.wh).data(), 3 * hd, hd, ah.data(), hv.data());
    Vec& gbx = t.param_grad(*p.bx);
    Vec& gbh = t.param_grad(*p.bh);
    for (std::size_t i = 0; i < 3 * hd; ++i) {
      gbx[i] += ax[i];
      gbh[i] += ah[i];
    }
    kernels::gemv_t_acc(e, p.wx->value.data(), 3 * hd, p.wx->cols, ax.data(), t.grad(x).data());
    Vec& ghv = t.grad(h);
    kernels::gemv_t_acc(e, p.wh->value.data(), 3 * hd, hd, ah.data(), ghv.data());
    for (std::size_t i = 0; i < hd; ++i) ghv[i] += gh_direct[i];
  });
}

Var Tape::cosine(Var a, Var b) {
  const Vec& av = value(a);
  const Vec& bv = value(b);
  if (av.size() != bv.size()) throw ContractViolation("cosine shape mismatch");
  const Real c = kernels::cosine(av.data(), bv.data(), av.size());
  return push(Vec{c}, "cosine", [a, b](Tape& t, const Vec& g) {
    const Vec& av = t.value(a);
    const Vec& bv = t.value(b);
    kernels::cosine_grad_acc(av.data(), bv.data(), av.size(), g[0], t.grad(a).data(),
                             t.grad(b).data());
  });
}

void Tape::backward(Var root, Real seed) {
  if (!recording()) throw ContractViolation("backward on a value-only tape");
  grad(root)[0] += seed;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.back) continue;
    n.back(*this, n.grad);
  }
}

std::optional<std::string> Tape::first_non_finite() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (Real x : nodes_[i].value) {
      if (!std::isfinite(x)) return std::string(nodes_[i].op) + " (node " + std::to_string(i) + ")";
    }
  }
  return std::nullopt;
}

}  // namespace kbd
