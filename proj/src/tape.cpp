#include "sidesum/tape.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sidesum::nd {

namespace {

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) {
    // ln(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

}  // namespace

std::int32_t Tape::check(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
        throw std::logic_error("Tape: invalid Var handle");
    return v.id;
}

Var Tape::push(const char* op, std::vector<std::int32_t> inputs, Tensor value,
               std::function<void(Tape&, const Node&)> backprop) {
    if (!value.all_finite())
        throw std::runtime_error(std::string("Tape: non-finite output of op '") + op + "'");
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value) { return push("leaf", {}, std::move(value), nullptr); }

Var Tape::add(Var a, Var b) {
    std::int32_t ia = check(a), ib = check(b);
    const Tensor& ta = nodes_[ia].value;
    const Tensor& tb = nodes_[ib].value;
    if (!ta.same_shape(tb))
        throw std::invalid_argument("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
    return push("add", {ia, ib}, std::move(out), [](Tape& t, const Node& n) {
        Tensor& ga = t.grad_of(n.inputs[0]);
        Tensor& gb = t.grad_of(n.inputs[1]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            ga[i] += n.grad[i];
            gb[i] += n.grad[i];
        }
    });
}

Var Tape::mul(Var a, Var b) {
    std::int32_t ia = check(a), ib = check(b);
    const Tensor& ta = nodes_[ia].value;
    const Tensor& tb = nodes_[ib].value;
    if (!ta.same_shape(tb))
        throw std::invalid_argument("mul: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
    return push("mul", {ia, ib}, std::move(out), [](Tape& t, const Node& n) {
        const Tensor& va = t.nodes_[n.inputs[0]].value;
        const Tensor& vb = t.nodes_[n.inputs[1]].value;
        Tensor& ga = t.grad_of(n.inputs[0]);
        Tensor& gb = t.grad_of(n.inputs[1]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            ga[i] += n.grad[i] * vb[i];
            gb[i] += n.grad[i] * va[i];
        }
    });
}

Var Tape::sigmoid(Var a) {
    std::int32_t ia = check(a);
    const Tensor& ta = nodes_[ia].value;
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(ta[i]);
    return push("sigmoid", {ia}, std::move(out), [](Tape& t, const Node& n) {
        Tensor& ga = t.grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            double s = n.value[i];
            ga[i] += n.grad[i] * s * (1.0 - s);
        }
    });
}

Var Tape::tanh(Var a) {
    std::int32_t ia = check(a);
    const Tensor& ta = nodes_[ia].value;
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(ta[i]);
    return push("tanh", {ia}, std::move(out), [](Tape& t, const Node& n) {
        Tensor& ga = t.grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            double y = n.value[i];
            ga[i] += n.grad[i] * (1.0 - y * y);
        }
    });
}

Var Tape::softplus(Var a) {
    std::int32_t ia = check(a);
    const Tensor& ta = nodes_[ia].value;
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_softplus(ta[i]);
    return push("softplus", {ia}, std::move(out), [](Tape& t, const Node& n) {
        const Tensor& x = t.nodes_[n.inputs[0]].value;
        Tensor& ga = t.grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            ga[i] += n.grad[i] * stable_sigmoid(x[i]);
    });
}

Var Tape::matmul(Var a, Var b) {
    std::int32_t ia = check(a), ib = check(b);
    const Tensor& ta = nodes_[ia].value;
    const Tensor& tb = nodes_[ib].value;
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + ta.shape_str() + " and " +
                                    tb.shape_str());
    std::size_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            double av = ta.at(i, l);
            for (std::size_t j = 0; j < n; ++j) out.at(i, j) += av * tb.at(l, j);
        }
    return push("matmul", {ia, ib}, std::move(out), [m, k, n](Tape& t, const Node& nd) {
        const Tensor& va = t.nodes_[nd.inputs[0]].value;
        const Tensor& vb = t.nodes_[nd.inputs[1]].value;
        Tensor& ga = t.grad_of(nd.inputs[0]);
        Tensor& gb = t.grad_of(nd.inputs[1]);
        // dA = dOut * B^T ; dB = A^T * dOut
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double g = nd.grad.at(i, j);
                for (std::size_t l = 0; l < k; ++l) {
                    ga.at(i, l) += g * vb.at(l, j);
                    gb.at(l, j) += g * va.at(i, l);
                }
            }
    });
}

Var Tape::matvec(Var m, Var v) {
    std::int32_t im = check(m), iv = check(v);
    const Tensor& tm = nodes_[im].value;
    const Tensor& tv = nodes_[iv].value;
    if (tm.rank() != 2 || tv.rank() != 1 || tm.dim(1) != tv.dim(0))
        throw std::invalid_argument("matvec: incompatible shapes " + tm.shape_str() + " and " +
                                    tv.shape_str());
    std::size_t rows = tm.dim(0), cols = tm.dim(1);
    Tensor out({rows});
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += tm.at(i, j) * tv[j];
        out[i] = s;
    }
    return push("matvec", {im, iv}, std::move(out), [rows, cols](Tape& t, const Node& nd) {
        const Tensor& vm = t.nodes_[nd.inputs[0]].value;
        const Tensor& vv = t.nodes_[nd.inputs[1]].value;
        Tensor& gm = t.grad_of(nd.inputs[0]);
        Tensor& gv = t.grad_of(nd.inputs[1]);
        for (std::size_t i = 0; i < rows; ++i) {
            double g = nd.grad[i];
            for (std::size_t j = 0; j < cols; ++j) {
                gm.at(i, j) += g * vv[j];
                gv[j] += g * vm.at(i, j);
            }
        }
    });
}

Var Tape::dot(Var a, Var b) {
    std::int32_t ia = check(a), ib = check(b);
    const Tensor& ta = nodes_[ia].value;
    const Tensor& tb = nodes_[ib].value;
    if (ta.rank() != 1 || tb.rank() != 1 || ta.dim(0) != tb.dim(0))
        throw std::invalid_argument("dot: incompatible shapes " + ta.shape_str() + " and " +
                                    tb.shape_str());
    double s = 0.0;
    for (std::size_t i = 0; i < ta.size(); ++i) s += ta[i] * tb[i];
    return push("dot", {ia, ib}, Tensor::scalar(s), [](Tape& t, const Node& n) {
        const Tensor& va = t.nodes_[n.inputs[0]].value;
        const Tensor& vb = t.nodes_[n.inputs[1]].value;
        Tensor& ga = t.grad_of(n.inputs[0]);
        Tensor& gb = t.grad_of(n.inputs[1]);
        double g = n.grad[0];
        for (std::size_t i = 0; i < va.size(); ++i) {
            ga[i] += g * vb[i];
            gb[i] += g * va[i];
        }
    });
}

Var Tape::concat(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no parts");
    std::vector<std::int32_t> ids;
    ids.reserve(parts.size());
    std::size_t total = 0;
    for (Var p : parts) {
        std::int32_t i = check(p);
        const Tensor& t = nodes_[i].value;
        if (t.rank() > 1)
            throw std::invalid_argument("concat: parts must be scalars or vectors, got " +
                                        t.shape_str());
        total += t.size();
        ids.push_back(i);
    }
    Tensor out({total});
    std::size_t off = 0;
    for (std::int32_t i : ids) {
        const Tensor& t = nodes_[i].value;
        for (std::size_t j = 0; j < t.size(); ++j) out[off + j] = t[j];
        off += t.size();
    }
    return push("concat", std::move(ids), std::move(out), [](Tape& t, const Node& n) {
        std::size_t off = 0;
        for (std::int32_t i : n.inputs) {
            Tensor& g = t.grad_of(i);
            for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[off + j];
            off += g.size();
        }
    });
}

Var Tape::slice(Var v, std::size_t start, std::size_t len) {
    std::int32_t iv = check(v);
    const Tensor& tv = nodes_[iv].value;
    if (tv.rank() != 1 || start + len > tv.dim(0))
        throw std::invalid_argument("slice: out of range on " + tv.shape_str());
    Tensor out({len});
    for (std::size_t i = 0; i < len; ++i) out[i] = tv[start + i];
    return push("slice", {iv}, std::move(out), [start](Tape& t, const Node& n) {
        Tensor& g = t.grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[start + i] += n.grad[i];
    });
}

Var Tape::index0(Var t, std::size_t i) {
    std::int32_t it = check(t);
    const Tensor& tt = nodes_[it].value;
    if (tt.rank() < 1 || i >= tt.dim(0))
        throw std::invalid_argument("index0: index " + std::to_string(i) + " out of range on " +
                                    tt.shape_str());
    std::vector<std::size_t> sub_shape(tt.shape().begin() + 1, tt.shape().end());
    std::size_t stride = shape_product(sub_shape);
    Tensor out(sub_shape);
    for (std::size_t j = 0; j < stride; ++j) out[j] = tt[i * stride + j];
    return push("index0", {it}, std::move(out), [i, stride](Tape& t, const Node& n) {
        Tensor& g = t.grad_of(n.inputs[0]);
        for (std::size_t j = 0; j < stride; ++j) g[i * stride + j] += n.grad[j];
    });
}

Var Tape::rows(Var m, std::span<const std::int32_t> ids) {
    std::int32_t im = check(m);
    const Tensor& tm = nodes_[im].value;
    if (tm.rank() != 2) throw std::invalid_argument("rows: expected matrix, got " + tm.shape_str());
    std::size_t d = tm.dim(1);
    for (std::int32_t id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= tm.dim(0))
            throw std::invalid_argument("rows: row id " + std::to_string(id) + " out of range");
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j)
            out.at(i, j) = tm.at(static_cast<std::size_t>(ids[i]), j);
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    return push("rows", {im}, std::move(out), [idv = std::move(idv), d](Tape& t, const Node& n) {
        Tensor& g = t.grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < idv.size(); ++i)
            for (std::size_t j = 0; j < d; ++j)
                g.at(static_cast<std::size_t>(idv[i]), j) += n.grad.at(i, j);
    });
}

Var Tape::scale(Var s, Var t) {
    std::int32_t is = check(s), it = check(t);
    const Tensor& ts = nodes_[is].value;
    const Tensor& tt = nodes_[it].value;
    if (ts.size() != 1) throw std::invalid_argument("scale: first argument must be a scalar");
    Tensor out(tt.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ts[0] * tt[i];
    return push("scale", {is, it}, std::move(out), [](Tape& tp, const Node& n) {
        const Tensor& vs = tp.nodes_[n.inputs[0]].value;
        const Tensor& vt = tp.nodes_[n.inputs[1]].value;
        Tensor& gs = tp.grad_of(n.inputs[0]);
        Tensor& gt = tp.grad_of(n.inputs[1]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            gs[0] += n.grad[i] * vt[i];
            gt[i] += n.grad[i] * vs[0];
        }
    });
}

Var Tape::average(std::span<const Var> scalars) {
    if (scalars.empty()) throw std::invalid_argument("average: no inputs");
    std::vector<std::int32_t> ids;
    ids.reserve(scalars.size());
    double sum = 0.0;
    for (Var v : scalars) {
        std::int32_t i = check(v);
        if (nodes_[i].value.size() != 1)
            throw std::invalid_argument("average: inputs must be scalars");
        sum += nodes_[i].value[0];
        ids.push_back(i);
    }
    double inv = 1.0 / static_cast<double>(ids.size());
    return push("average", std::move(ids), Tensor::scalar(sum * inv),
                [inv](Tape& t, const Node& n) {
                    for (std::int32_t i : n.inputs) t.grad_of(i)[0] += n.grad[0] * inv;
                });
}

Var Tape::softmax(Var z) {
    std::int32_t iz = check(z);
    const Tensor& tz = nodes_[iz].value;
    if (tz.rank() != 1 || tz.dim(0) < 1)
        throw std::invalid_argument("softmax: expected non-empty vector, got " + tz.shape_str());
    double mx = tz[0];
    for (std::size_t i = 1; i < tz.size(); ++i) mx = std::max(mx, tz[i]);
    Tensor out(tz.shape());
    double denom = 0.0;
    for (std::size_t i = 0; i < tz.size(); ++i) {
        out[i] = std::exp(tz[i] - mx);
        denom += out[i];
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= denom;
    return push("softmax", {iz}, std::move(out), [](Tape& t, const Node& n) {
        // dz_i = p_i (g_i - sum_j g_j p_j)
        Tensor& gz = t.grad_of(n.inputs[0]);
        double gp = 0.0;
        for (std::size_t i = 0; i < n.grad.size(); ++i) gp += n.grad[i] * n.value[i];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            gz[i] += n.value[i] * (n.grad[i] - gp);
    });
}

Var Tape::cross_entropy(Var p, std::size_t label) {
    std::int32_t ip = check(p);
    const Tensor& tp = nodes_[ip].value;
    if (tp.rank() != 1 || label >= tp.dim(0))
        throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                    " out of range on " + tp.shape_str());
    constexpr double kFloor = 1e-12;
    double clamped = std::max(tp[label], kFloor);
    return push("cross_entropy", {ip}, Tensor::scalar(-std::log(clamped)),
                [label, kFloor](Tape& t, const Node& n) {
                    const Tensor& vp = t.nodes_[n.inputs[0]].value;
                    Tensor& gp = t.grad_of(n.inputs[0]);
                    // constant below the clamp floor
                    if (vp[label] > kFloor) gp[label] += n.grad[0] * (-1.0 / vp[label]);
                });
}

Var Tape::temporal_conv(Var input, Var kernel, Var bias) {
    std::int32_t iw = check(input), ik = check(kernel), ib = check(bias);
    const Tensor& w = nodes_[iw].value;
    const Tensor& k = nodes_[ik].value;
    const Tensor& b = nodes_[ib].value;
    if (w.rank() != 2 || k.rank() != 2 || w.dim(1) != k.dim(1))
        throw std::invalid_argument("temporal_conv: incompatible shapes " + w.shape_str() +
                                    " and " + k.shape_str());
    if (b.size() != 1) throw std::invalid_argument("temporal_conv: bias must be a scalar");
    std::size_t len = w.dim(0), h = k.dim(0), d = w.dim(1);
    if (h > len)
        throw std::invalid_argument("temporal_conv: kernel width " + std::to_string(h) +
                                    " exceeds input length " + std::to_string(len));
    std::size_t out_len = len - h + 1;
    Tensor pre({out_len});
    for (std::size_t i = 0; i < out_len; ++i) {
        double s = b[0];
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < d; ++c) s += k.at(r, c) * w.at(i + r, c);
        pre[i] = s;
    }
    Tensor out({out_len});
    for (std::size_t i = 0; i < out_len; ++i) out[i] = stable_softplus(pre[i]);
    return push("temporal_conv", {iw, ik, ib}, std::move(out),
                [pre = std::move(pre), h, d](Tape& t, const Node& n) {
                    const Tensor& w = t.nodes_[n.inputs[0]].value;
                    const Tensor& k = t.nodes_[n.inputs[1]].value;
                    Tensor& gw = t.grad_of(n.inputs[0]);
                    Tensor& gk = t.grad_of(n.inputs[1]);
                    Tensor& gb = t.grad_of(n.inputs[2]);
                    for (std::size_t i = 0; i < n.grad.size(); ++i) {
                        double g = n.grad[i] * stable_sigmoid(pre[i]);
                        if (g == 0.0) continue;
                        gb[0] += g;
                        for (std::size_t r = 0; r < h; ++r)
                            for (std::size_t c = 0; c < d; ++c) {
                                gk.at(r, c) += g * w.at(i + r, c);
                                gw.at(i + r, c) += g * k.at(r, c);
                            }
                    }
                });
}

Var Tape::max_over_time(Var f) {
    std::int32_t iv = check(f);
    const Tensor& tf = nodes_[iv].value;
    if (tf.rank() != 1 || tf.dim(0) < 1)
        throw std::invalid_argument("max_over_time: expected non-empty vector");
    std::size_t arg = 0;
    for (std::size_t i = 1; i < tf.size(); ++i)
        if (tf[i] > tf[arg]) arg = i;  // first maximal index wins ties
    return push("max_over_time", {iv}, Tensor::scalar(tf[arg]), [arg](Tape& t, const Node& n) {
        t.grad_of(n.inputs[0])[arg] += n.grad[0];
    });
}

Var Tape::lrn(Var v, const LrnParams& p) {
    std::int32_t iv = check(v);
    const Tensor& tv = nodes_[iv].value;
    if (tv.rank() != 1) throw std::invalid_argument("lrn: expected vector, got " + tv.shape_str());
    if (p.radius < 0) throw std::invalid_argument("lrn: radius must be >= 0");
    std::size_t c = tv.dim(0);
    auto window = [&](std::size_t i, auto&& fn) {
        std::size_t lo = i >= static_cast<std::size_t>(p.radius) ? i - p.radius : 0;
        std::size_t hi = std::min(c - 1, i + static_cast<std::size_t>(p.radius));
        for (std::size_t j = lo; j <= hi; ++j) fn(j);
    };
    Tensor denom({c});  // kappa + alpha * windowed sum of squares
    for (std::size_t i = 0; i < c; ++i) {
        double s = 0.0;
        window(i, [&](std::size_t j) { s += tv[j] * tv[j]; });
        denom[i] = p.kappa + p.alpha * s;
    }
    Tensor out({c});
    for (std::size_t i = 0; i < c; ++i) out[i] = tv[i] * std::pow(denom[i], -p.beta);
    return push("lrn", {iv}, std::move(out),
                [denom = std::move(denom), p, window](Tape& t, const Node& n) {
                    const Tensor& x = t.nodes_[n.inputs[0]].value;
                    Tensor& gx = t.grad_of(n.inputs[0]);
                    for (std::size_t i = 0; i < n.grad.size(); ++i) {
                        double g = n.grad[i];
                        if (g == 0.0) continue;
                        double di = std::pow(denom[i], -p.beta);
                        gx[i] += g * di;
                        double common = g * x[i] * (-p.beta) * di / denom[i] * p.alpha * 2.0;
                        window(i, [&](std::size_t j) { gx[j] += common * x[j]; });
                    }
                });
}

const Tensor& Tape::grad(Var v) const {
    std::int32_t i = check(v);
    if (!swept_) throw std::logic_error("Tape::grad before backward");
    return nodes_[i].grad;
}

void Tape::backward(Var loss) {
    std::int32_t il = check(loss);
    if (swept_) throw std::logic_error("Tape::backward: record already consumed");
    if (nodes_[il].value.size() != 1)
        throw std::invalid_argument("backward: loss must be a scalar, got " +
                                    nodes_[il].value.shape_str());
    for (Node& n : nodes_) n.grad = Tensor(n.value.shape());
    nodes_[il].grad[0] = 1.0;
    swept_ = true;
    for (std::int32_t i = il; i >= 0; --i) {
        const Node& n = nodes_[i];
        if (n.backprop) n.backprop(*this, n);
    }
}

LstmState lstm_cell(Tape& tape, Var x, LstmState prev, const LstmWeights& w) {
    const Tensor& tw = tape.value(w.w);
    const Tensor& tb = tape.value(w.b);
    const Tensor& th = tape.value(prev.h);
    const Tensor& tx = tape.value(x);
    if (tw.rank() != 2 || th.rank() != 1 || tx.rank() != 1)
        throw std::invalid_argument("lstm_cell: bad ranks");
    std::size_t hidden = th.dim(0);
    if (tw.dim(0) != 4 * hidden || tw.dim(1) != hidden + tx.dim(0) ||
        tb.size() != 4 * hidden || tape.value(prev.c).size() != hidden)
        throw std::invalid_argument("lstm_cell: weight shape " + tw.shape_str() +
                                    " inconsistent with state/input sizes");
    std::array<Var, 2> zparts{prev.h, x};
    Var z = tape.concat(zparts);
    Var pre = tape.add(tape.matvec(w.w, z), w.b);
    Var f = tape.sigmoid(tape.slice(pre, 0, hidden));
    Var i = tape.sigmoid(tape.slice(pre, hidden, hidden));
    Var o = tape.sigmoid(tape.slice(pre, 2 * hidden, hidden));
    Var g = tape.tanh(tape.slice(pre, 3 * hidden, hidden));
    Var c = tape.add(tape.mul(f, prev.c), tape.mul(i, g));
    Var h = tape.mul(o, tape.tanh(c));
    return LstmState{h, c};
}

LstmState lstm_zero_state(Tape& tape, std::size_t hidden) {
    return LstmState{tape.leaf(Tensor({hidden})), tape.leaf(Tensor({hidden}))};
}

}  // namespace sidesum::nd
