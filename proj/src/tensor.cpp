#include "tinyvlm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace tinyvlm {

namespace {

std::size_t shape_product(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("non-positive dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
    if (a->shape != b->shape) {
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             a->shape_str() + " vs " + b->shape_str());
    }
}

}  // namespace

Tensor::Tensor(std::vector<int> s, bool req_grad)
    : shape(std::move(s)), requires_grad(req_grad) {
    data.assign(shape_product(shape), 0.0);
    if (requires_grad) grad.assign(data.size(), 0.0);
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    std::fill(grad.begin(), grad.end(), 0.0);
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

TensorPtr make_tensor(std::vector<int> shape, bool requires_grad) {
    return std::make_shared<Tensor>(std::move(shape), requires_grad);
}

TensorPtr make_tensor(std::vector<int> shape, std::vector<double> values,
                      bool requires_grad) {
    auto t = std::make_shared<Tensor>(std::move(shape), requires_grad);
    if (values.size() != t->data.size()) {
        throw DimensionError("value count does not match shape " +
                             t->shape_str());
    }
    t->data = std::move(values);
    return t;
}

// --- rng -------------------------------------------------------------------

namespace {
std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}
}  // namespace

Rng::Rng(std::uint64_t seed) {
    std::uint64_t s = seed;
    state_[0] = splitmix64(s);
    state_[1] = splitmix64(s);
}

std::uint64_t Rng::next_u64() {
    // xorshift128+
    std::uint64_t x = state_[0];
    const std::uint64_t y = state_[1];
    state_[0] = y;
    x ^= x << 23;
    state_[1] = x ^ y ^ (x >> 17) ^ (y >> 26);
    return state_[1] + y;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw InvalidRequestError("Rng::below(0)");
    // rejection sampling for an unbiased draw
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
        v = next_u64();
    } while (v >= limit);
    return v % n;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1, u2;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

// --- tape -------------------------------------------------------------------

void Tape::backward(const TensorPtr& loss) {
    if (loss->size() != 1) {
        throw InvalidRequestError("backward requires a scalar loss, got " +
                                  loss->shape_str());
    }
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

// --- ops ---------------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] * B[k,n]; ikj order keeps the inner loop contiguous.
void gemm_acc(const double* a, const double* b, double* c, int m, int k,
              int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_bt_acc(const double* a, const double* b, double* c, int m, int k,
                 int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<std::size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] += s;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_at_acc(const double* a, const double* b, double* c, int m, int k,
                 int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        const double* brow = b + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void require_matrix(const TensorPtr& t, const char* op) {
    if (t->shape.size() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got " +
                             t->shape_str());
    }
}

}  // namespace

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a->shape[1] != b->shape[0]) {
        throw DimensionError("matmul: inner dimensions disagree, " +
                             a->shape_str() + " x " + b->shape_str());
    }
    const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = make_tensor({m, n}, a->requires_grad || b->requires_grad);
    gemm_acc(a->data.data(), b->data.data(), out->data.data(), m, k, n);
    if (out->requires_grad) {
        tape.record([a, b, out, m, k, n] {
            if (a->requires_grad) {
                a->ensure_grad();
                gemm_bt_acc(out->grad.data(), b->data.data(), a->grad.data(),
                            m, n, k);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                gemm_at_acc(a->data.data(), out->grad.data(), b->grad.data(),
                            m, k, n);
            }
        });
    }
    return out;
}

TensorPtr transpose(Tape& tape, const TensorPtr& a) {
    require_matrix(a, "transpose");
    const int m = a->shape[0], n = a->shape[1];
    auto out = make_tensor({n, m}, a->requires_grad);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->data[static_cast<std::size_t>(j) * m + i] =
                a->data[static_cast<std::size_t>(i) * n + j];
    if (out->requires_grad) {
        tape.record([a, out, m, n] {
            a->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    a->grad[static_cast<std::size_t>(i) * n + j] +=
                        out->grad[static_cast<std::size_t>(j) * m + i];
        });
    }
    return out;
}

TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "add");
    auto out = make_tensor(a->shape, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < out->size(); ++i)
        out->data[i] = a->data[i] + b->data[i];
    if (out->requires_grad) {
        tape.record([a, b, out] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i)
                    a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i)
                    b->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

TensorPtr scale(Tape& tape, const TensorPtr& a, double c) {
    auto out = make_tensor(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * c;
    if (out->requires_grad) {
        tape.record([a, out, c] {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i)
                a->grad[i] += out->grad[i] * c;
        });
    }
    return out;
}

TensorPtr bias_add(Tape& tape, const TensorPtr& x, const TensorPtr& bias) {
    require_matrix(x, "bias_add");
    if (bias->shape.size() != 1 || bias->shape[0] != x->shape[1]) {
        throw DimensionError("bias_add: bias " + bias->shape_str() +
                             " does not match last axis of " + x->shape_str());
    }
    const int m = x->shape[0], n = x->shape[1];
    auto out = make_tensor({m, n}, x->requires_grad || bias->requires_grad);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->data[static_cast<std::size_t>(i) * n + j] =
                x->data[static_cast<std::size_t>(i) * n + j] + bias->data[j];
    if (out->requires_grad) {
        tape.record([x, bias, out, m, n] {
            if (x->requires_grad) {
                x->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i)
                    x->grad[i] += out->grad[i];
            }
            if (bias->requires_grad) {
                bias->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        bias->grad[j] +=
                            out->grad[static_cast<std::size_t>(i) * n + j];
            }
        });
    }
    return out;
}

TensorPtr softmax_rows(Tape& tape, const TensorPtr& x) {
    require_matrix(x, "softmax_rows");
    const int m = x->shape[0], n = x->shape[1];
    auto out = make_tensor({m, n}, x->requires_grad);
    for (int i = 0; i < m; ++i) {
        const double* row = x->data.data() + static_cast<std::size_t>(i) * n;
        double* orow = out->data.data() + static_cast<std::size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= z;
    }
    if (out->requires_grad) {
        tape.record([x, out, m, n] {
            x->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const double* p =
                    out->data.data() + static_cast<std::size_t>(i) * n;
                const double* dy =
                    out->grad.data() + static_cast<std::size_t>(i) * n;
                double* dx = x->grad.data() + static_cast<std::size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += dy[j] * p[j];
                for (int j = 0; j < n; ++j) dx[j] += p[j] * (dy[j] - dot);
            }
        });
    }
    return out;
}

TensorPtr layer_norm(Tape& tape, const TensorPtr& x, const TensorPtr& gain,
                     const TensorPtr& bias, double eps) {
    require_matrix(x, "layer_norm");
    if (eps <= 0.0) throw InvalidRequestError("layer_norm: eps must be > 0");
    const int m = x->shape[0], d = x->shape[1];
    if (gain->shape != std::vector<int>{d} || bias->shape != std::vector<int>{d}) {
        throw DimensionError("layer_norm: gain/bias must be [" +
                             std::to_string(d) + "]");
    }
    auto out = make_tensor(
        {m, d},
        x->requires_grad || gain->requires_grad || bias->requires_grad);
    auto xhat = std::make_shared<std::vector<double>>(out->size());
    auto inv_std = std::make_shared<std::vector<double>>(m);
    for (int i = 0; i < m; ++i) {
        const double* row = x->data.data() + static_cast<std::size_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (int j = 0; j < d; ++j) {
            const double xh = (row[j] - mu) * is;
            (*xhat)[static_cast<std::size_t>(i) * d + j] = xh;
            out->data[static_cast<std::size_t>(i) * d + j] =
                gain->data[j] * xh + bias->data[j];
        }
    }
    if (out->requires_grad) {
        tape.record([x, gain, bias, out, xhat, inv_std, m, d] {
            for (int i = 0; i < m; ++i) {
                const double* dy =
                    out->grad.data() + static_cast<std::size_t>(i) * d;
                const double* xh =
                    xhat->data() + static_cast<std::size_t>(i) * d;
                if (gain->requires_grad) {
                    gain->ensure_grad();
                    for (int j = 0; j < d; ++j)
                        gain->grad[j] += dy[j] * xh[j];
                }
                if (bias->requires_grad) {
                    bias->ensure_grad();
                    for (int j = 0; j < d; ++j) bias->grad[j] += dy[j];
                }
                if (x->requires_grad) {
                    x->ensure_grad();
                    double* dx =
                        x->grad.data() + static_cast<std::size_t>(i) * d;
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double dxh = dy[j] * gain->data[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= d;
                    mean_dxhat_xhat /= d;
                    const double is = (*inv_std)[i];
                    for (int j = 0; j < d; ++j) {
                        const double dxh = dy[j] * gain->data[j];
                        dx[j] += is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

TensorPtr silu(Tape& tape, const TensorPtr& x) {
    auto out = make_tensor(x->shape, x->requires_grad);
    for (std::size_t i = 0; i < out->size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-x->data[i]));
        out->data[i] = x->data[i] * s;
    }
    if (out->requires_grad) {
        tape.record([x, out] {
            x->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-x->data[i]));
                x->grad[i] += out->grad[i] * s * (1.0 + x->data[i] * (1.0 - s));
            }
        });
    }
    return out;
}

TensorPtr embedding_rows(Tape& tape, const TensorPtr& table,
                         const std::vector<int>& ids) {
    require_matrix(table, "embedding_rows");
    const int v = table->shape[0], d = table->shape[1];
    const int t = static_cast<int>(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= v)
            throw InvalidRequestError("embedding_rows: id " +
                                      std::to_string(id) + " out of range");
    }
    auto out = make_tensor({t, d}, table->requires_grad);
    for (int i = 0; i < t; ++i)
        std::copy_n(table->data.data() + static_cast<std::size_t>(ids[i]) * d,
                    d, out->data.data() + static_cast<std::size_t>(i) * d);
    if (out->requires_grad) {
        tape.record([table, out, ids, d, t] {
            table->ensure_grad();
            for (int i = 0; i < t; ++i) {
                double* dst =
                    table->grad.data() + static_cast<std::size_t>(ids[i]) * d;
                const double* src =
                    out->grad.data() + static_cast<std::size_t>(i) * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

TensorPtr slice_cols(Tape& tape, const TensorPtr& x, int start, int n) {
    require_matrix(x, "slice_cols");
    const int m = x->shape[0], w = x->shape[1];
    if (start < 0 || n <= 0 || start + n > w)
        throw DimensionError("slice_cols: [" + std::to_string(start) + "," +
                             std::to_string(start + n) + ") out of " +
                             x->shape_str());
    auto out = make_tensor({m, n}, x->requires_grad);
    for (int i = 0; i < m; ++i)
        std::copy_n(
            x->data.data() + static_cast<std::size_t>(i) * w + start, n,
            out->data.data() + static_cast<std::size_t>(i) * n);
    if (out->requires_grad) {
        tape.record([x, out, start, m, n, w] {
            x->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    x->grad[static_cast<std::size_t>(i) * w + start + j] +=
                        out->grad[static_cast<std::size_t>(i) * n + j];
        });
    }
    return out;
}

TensorPtr concat_cols(Tape& tape, const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw InvalidRequestError("concat_cols: empty list");
    const int m = parts[0]->shape[0];
    int n = 0;
    bool req = false;
    for (const auto& p : parts) {
        require_matrix(p, "concat_cols");
        if (p->shape[0] != m)
            throw DimensionError("concat_cols: row counts differ");
        n += p->shape[1];
        req = req || p->requires_grad;
    }
    auto out = make_tensor({m, n}, req);
    int off = 0;
    for (const auto& p : parts) {
        const int w = p->shape[1];
        for (int i = 0; i < m; ++i)
            std::copy_n(p->data.data() + static_cast<std::size_t>(i) * w, w,
                        out->data.data() + static_cast<std::size_t>(i) * n +
                            off);
        off += w;
    }
    if (req) {
        tape.record([parts, out, m, n] {
            int off2 = 0;
            for (const auto& p : parts) {
                const int w = p->shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            p->grad[static_cast<std::size_t>(i) * w + j] +=
                                out->grad[static_cast<std::size_t>(i) * n +
                                          off2 + j];
                }
                off2 += w;
            }
        });
    }
    return out;
}

TensorPtr slice_rows(Tape& tape, const TensorPtr& x, int start, int n) {
    require_matrix(x, "slice_rows");
    const int m = x->shape[0], w = x->shape[1];
    if (start < 0 || n <= 0 || start + n > m)
        throw DimensionError("slice_rows: [" + std::to_string(start) + "," +
                             std::to_string(start + n) + ") out of " +
                             x->shape_str());
    auto out = make_tensor({n, w}, x->requires_grad);
    std::copy_n(x->data.data() + static_cast<std::size_t>(start) * w,
                static_cast<std::size_t>(n) * w, out->data.data());
    if (out->requires_grad) {
        tape.record([x, out, start, n, w] {
            x->ensure_grad();
            for (std::size_t i = 0; i < static_cast<std::size_t>(n) * w; ++i)
                x->grad[static_cast<std::size_t>(start) * w + i] +=
                    out->grad[i];
        });
    }
    return out;
}

TensorPtr concat_rows(Tape& tape, const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw InvalidRequestError("concat_rows: empty list");
    const int w = parts[0]->shape.size() == 2 ? parts[0]->shape[1] : -1;
    int m = 0;
    bool req = false;
    for (const auto& p : parts) {
        require_matrix(p, "concat_rows");
        if (p->shape[1] != w)
            throw DimensionError("concat_rows: column counts differ");
        m += p->shape[0];
        req = req || p->requires_grad;
    }
    auto out = make_tensor({m, w}, req);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p->data.data(), p->size(), out->data.data() + off);
        off += p->size();
    }
    if (req) {
        tape.record([parts, out] {
            std::size_t off2 = 0;
            for (const auto& p : parts) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t i = 0; i < p->size(); ++i)
                        p->grad[i] += out->grad[off2 + i];
                }
                off2 += p->size();
            }
        });
    }
    return out;
}

TensorPtr reshape(Tape& tape, const TensorPtr& x, std::vector<int> shape) {
    auto out = make_tensor(std::move(shape), x->requires_grad);
    if (out->size() != x->size())
        throw DimensionError("reshape: element count changes from " +
                             x->shape_str() + " to " + out->shape_str());
    out->data = x->data;
    if (out->requires_grad) {
        tape.record([x, out] {
            x->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i)
                x->grad[i] += out->grad[i];
        });
    }
    return out;
}

TensorPtr masked_cross_entropy(Tape& tape, const TensorPtr& logits,
                               const std::vector<int>& targets,
                               const std::vector<bool>& mask) {
    require_matrix(logits, "masked_cross_entropy");
    const int t = logits->shape[0], v = logits->shape[1];
    if (static_cast<int>(targets.size()) != t ||
        static_cast<int>(mask.size()) != t) {
        throw DimensionError(
            "masked_cross_entropy: targets/mask length must equal " +
            std::to_string(t));
    }
    int active = 0;
    for (int i = 0; i < t; ++i) {
        if (!mask[i]) continue;
        ++active;
        if (targets[i] < 0 || targets[i] >= v)
            throw InvalidRequestError("masked_cross_entropy: target " +
                                      std::to_string(targets[i]) +
                                      " outside vocabulary");
    }
    if (active == 0)
        throw InvalidRequestError(
            "masked_cross_entropy: mask selects no positions");
    auto out = make_tensor({1}, logits->requires_grad);
    // per-row softmax probabilities, kept for backward
    auto probs = std::make_shared<std::vector<double>>();
    probs->assign(logits->size(), 0.0);
    double loss = 0.0;
    for (int i = 0; i < t; ++i) {
        if (!mask[i]) continue;
        const double* row =
            logits->data.data() + static_cast<std::size_t>(i) * v;
        double* prow = probs->data() + static_cast<std::size_t>(i) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) {
            prow[j] = std::exp(row[j] - mx);
            z += prow[j];
        }
        for (int j = 0; j < v; ++j) prow[j] /= z;
        loss -= std::log(prow[targets[i]]);
    }
    out->data[0] = loss / active;
    if (out->requires_grad) {
        tape.record([logits, out, probs, targets, mask, t, v, active] {
            logits->ensure_grad();
            const double g = out->grad[0] / active;
            for (int i = 0; i < t; ++i) {
                if (!mask[i]) continue;
                const double* prow =
                    probs->data() + static_cast<std::size_t>(i) * v;
                double* drow =
                    logits->grad.data() + static_cast<std::size_t>(i) * v;
                for (int j = 0; j < v; ++j) drow[j] += g * prow[j];
                drow[targets[i]] -= g;
            }
        });
    }
    return out;
}

// --- params / optimizer -----------------------------------------------------

Param& ParamStore::add(const std::string& name, TensorPtr t, bool frozen) {
    for (const auto& p : params) {
        if (p.name == name)
            throw InternalStateError("duplicate parameter name: " + name);
    }
    t->requires_grad = !frozen;
    params.push_back({name, std::move(t), frozen});
    return params.back();
}

Param* ParamStore::find(const std::string& name) {
    for (auto& p : params)
        if (p.name == name) return &p;
    return nullptr;
}

const Param* ParamStore::find(const std::string& name) const {
    for (const auto& p : params)
        if (p.name == name) return &p;
    return nullptr;
}

std::vector<TensorPtr> ParamStore::trainable() const {
    std::vector<TensorPtr> out;
    for (const auto& p : params)
        if (!p.frozen) out.push_back(p.tensor);
    return out;
}

std::size_t ParamStore::trainable_scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params)
        if (!p.frozen) n += p.tensor->size();
    return n;
}

void ParamStore::zero_grads() {
    for (auto& p : params)
        if (!p.frozen) p.tensor->zero_grad();
}

std::uint64_t fnv1a64(const void* bytes, std::size_t len, std::uint64_t seed) {
    const unsigned char* b = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t ParamStore::frozen_digest() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : params) {
        if (!p.frozen) continue;
        h = fnv1a64(p.name.data(), p.name.size(), h);
        h = fnv1a64(p.tensor->data.data(),
                    p.tensor->data.size() * sizeof(double), h);
    }
    return h;
}

std::uint64_t ParamStore::digest_all() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : params) {
        h = fnv1a64(p.name.data(), p.name.size(), h);
        h = fnv1a64(p.tensor->data.data(),
                    p.tensor->data.size() * sizeof(double), h);
    }
    return h;
}

Optimizer::Optimizer(OptKind kind, double learning_rate, double beta1,
                     double beta2, double eps)
    : kind_(kind), lr_(learning_rate), beta1_(beta1), beta2_(beta2),
      eps_(eps) {
    if (learning_rate <= 0.0)
        throw InvalidRequestError("learning rate must be positive");
}

Optimizer::Moments& Optimizer::moments_for(const Param& p) {
    for (auto& [name, m] : moments_)
        if (name == p.name) return m;
    moments_.push_back({p.name, Moments{}});
    auto& m = moments_.back().second;
    m.m.assign(p.tensor->size(), 0.0);
    m.v.assign(p.tensor->size(), 0.0);
    return m;
}

void Optimizer::step(ParamStore& store) {
    ++step_count_;
    for (auto& p : store.params) {
        if (p.frozen) continue;
        auto& t = *p.tensor;
        if (t.grad.size() != t.data.size())
            throw InternalStateError("missing gradient on trainable param " +
                                     p.name);
        if (kind_ == OptKind::Sgd) {
            for (std::size_t i = 0; i < t.data.size(); ++i)
                t.data[i] -= lr_ * t.grad[i];
        } else {
            auto& mo = moments_for(p);
            const double bc1 = 1.0 - std::pow(beta1_, step_count_);
            const double bc2 = 1.0 - std::pow(beta2_, step_count_);
            for (std::size_t i = 0; i < t.data.size(); ++i) {
                mo.m[i] = beta1_ * mo.m[i] + (1.0 - beta1_) * t.grad[i];
                mo.v[i] =
                    beta2_ * mo.v[i] + (1.0 - beta2_) * t.grad[i] * t.grad[i];
                const double mhat = mo.m[i] / bc1;
                const double vhat = mo.v[i] / bc2;
                t.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
        t.zero_grad();
    }
}

// --- checkpoint io -----------------------------------------------------------

void save_checkpoint(const std::string& path, const ParamStore& store) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for write: " + path);
    f << "TINYVLM-CKPT 1\n";
    f << store.params.size() << "\n";
    for (const auto& p : store.params) {
        f << p.name << " " << p.tensor->shape.size();
        for (int d : p.tensor->shape) f << " " << d;
        f << " " << (p.frozen ? 1 : 0) << "\n";
    }
    f << "DATA\n";
    for (const auto& p : store.params) {
        for (double v : p.tensor->data) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            unsigned char buf[8];
            for (int i = 0; i < 8; ++i)
                buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
            f.write(reinterpret_cast<const char*>(buf), 8);
        }
    }
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

namespace {

std::vector<ManifestEntry> read_manifest_stream(std::ifstream& f,
                                                const std::string& path) {
    std::string magic;
    int version = 0;
    f >> magic >> version;
    if (magic != "TINYVLM-CKPT" || version != 1)
        throw std::runtime_error("not a tinyvlm checkpoint: " + path);
    std::size_t n = 0;
    f >> n;
    std::vector<ManifestEntry> entries(n);
    for (auto& e : entries) {
        std::size_t ndim = 0;
        f >> e.name >> ndim;
        e.shape.resize(ndim);
        for (auto& d : e.shape) f >> d;
        int fr = 0;
        f >> fr;
        e.frozen = fr != 0;
    }
    std::string data_tag;
    f >> data_tag;
    if (data_tag != "DATA")
        throw std::runtime_error("corrupt checkpoint header: " + path);
    f.get();  // the newline before the payload
    return entries;
}

}  // namespace

std::vector<ManifestEntry> read_checkpoint_manifest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    return read_manifest_stream(f, path);
}

void load_checkpoint(const std::string& path, ParamStore& store) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    auto entries = read_manifest_stream(f, path);
    if (entries.size() != store.params.size())
        throw std::runtime_error("checkpoint " + path + " has " +
                                 std::to_string(entries.size()) +
                                 " params, store expects " +
                                 std::to_string(store.params.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        auto& p = store.params[i];
        const auto& e = entries[i];
        if (e.name != p.name || e.shape != p.tensor->shape)
            throw std::runtime_error("checkpoint manifest mismatch at " +
                                     p.name);
        for (double& v : p.tensor->data) {
            unsigned char buf[8];
            f.read(reinterpret_cast<char*>(buf), 8);
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b)
                bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
            std::memcpy(&v, &bits, 8);
        }
    }
    if (!f) throw std::runtime_error("checkpoint payload truncated: " + path);
}

}  // namespace tinyvlm
