// SPDX-License-Identifier: Apache-2.0
#include "dclab/model.hpp"

#include "dclab/common.hpp"
#include "dclab/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace dclab::model {

namespace {

using Eigen::Index;

template <typename T>
using MapM = Eigen::Map<Matrix<T>>;
template <typename T>
using CMapM = Eigen::Map<const Matrix<T>>;
template <typename T>
using Strided = Eigen::Map<Matrix<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStrided = Eigen::Map<const Matrix<T>, 0, Eigen::OuterStride<>>;

constexpr double kRmsEps = 1e-5;

template <typename T>
CMapM<T> weight(const Parameters<T>& p, std::size_t idx) {
    const auto& info = p.layout().tensors()[idx];
    const int cols = info.shape.size() == 2 ? info.shape[1] : info.shape[0];
    const int rows = info.shape.size() == 2 ? info.shape[0] : 1;
    return CMapM<T>(p.data(idx), rows, cols);
}

template <typename T>
MapM<T> weight(Parameters<T>& p, std::size_t idx) {
    const auto& info = p.layout().tensors()[idx];
    const int cols = info.shape.size() == 2 ? info.shape[1] : info.shape[0];
    const int rows = info.shape.size() == 2 ? info.shape[0] : 1;
    return MapM<T>(p.data(idx), rows, cols);
}

template <typename T>
void rms_forward(const Matrix<T>& x, const T* gain, Matrix<T>& y, AlignedVector<T>& inv_rms) {
    const Index n = x.rows();
    const Index d = x.cols();
    y.resize(n, d);
    inv_rms.resize(static_cast<std::size_t>(n));
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> g(gain, d);
    for (Index i = 0; i < n; ++i) {
        const T ms = x.row(i).squaredNorm() / static_cast<T>(d);
        const T r = T(1) / std::sqrt(ms + static_cast<T>(kRmsEps));
        inv_rms[static_cast<std::size_t>(i)] = r;
        y.row(i) = x.row(i).cwiseProduct(g) * r;
    }
}

// dx += d(rmsnorm)/dx^T dy ; dgain += ...
template <typename T>
void rms_backward(const Matrix<T>& dy, const Matrix<T>& x, const AlignedVector<T>& inv_rms, const T* gain,
                  Matrix<T>& dx, T* dgain) {
    const Index n = x.rows();
    const Index d = x.cols();
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> g(gain, d);
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> dg(dgain, d);
    for (Index i = 0; i < n; ++i) {
        const T r = inv_rms[static_cast<std::size_t>(i)];
        const auto gdy = dy.row(i).cwiseProduct(g);
        const T dot = gdy.dot(x.row(i));
        dx.row(i) += r * gdy - x.row(i) * (r * r * r * dot / static_cast<T>(d));
        dg += dy.row(i).cwiseProduct(x.row(i)) * r;
    }
}

struct RopeTable {
    std::vector<double> cos, sin;  // [pos][pair]
    int pairs = 0;
};

RopeTable rope_table(int seq_len, int head_dim, double base) {
    RopeTable t;
    t.pairs = head_dim / 2;
    t.cos.resize(static_cast<std::size_t>(seq_len) * t.pairs);
    t.sin.resize(t.cos.size());
    for (int p = 0; p < seq_len; ++p) {
        for (int i = 0; i < t.pairs; ++i) {
            const double freq = std::pow(base, -2.0 * i / head_dim);
            const double ang = p * freq;
            t.cos[static_cast<std::size_t>(p) * t.pairs + i] = std::cos(ang);
            t.sin[static_cast<std::size_t>(p) * t.pairs + i] = std::sin(ang);
        }
    }
    return t;
}

// Rotates consecutive pairs of every head; `inverse` applies the transpose
// rotation (used to pull gradients back through the embedding).
template <typename T>
void apply_rope_row(T* row, int n_heads, int head_dim, const RopeTable& table, int pos, bool inverse) {
    const double* c = table.cos.data() + static_cast<std::size_t>(pos) * table.pairs;
    const double* s = table.sin.data() + static_cast<std::size_t>(pos) * table.pairs;
    for (int h = 0; h < n_heads; ++h) {
        T* v = row + static_cast<std::ptrdiff_t>(h) * head_dim;
        for (int i = 0; i < table.pairs; ++i) {
            const T ci = static_cast<T>(c[i]);
            const T si = inverse ? static_cast<T>(-s[i]) : static_cast<T>(s[i]);
            const T a = v[2 * i];
            const T b = v[2 * i + 1];
            v[2 * i] = a * ci - b * si;
            v[2 * i + 1] = a * si + b * ci;
        }
    }
}

template <typename T>
void apply_rope(Matrix<T>& m, int seq_len, int n_heads, int head_dim, const RopeTable& table, bool inverse) {
    for (Index r = 0; r < m.rows(); ++r) {
        apply_rope_row(m.row(r).data(), n_heads, head_dim, table, static_cast<int>(r % seq_len), inverse);
    }
}

template <typename T>
T sigmoid(T a) {
    return T(1) / (T(1) + std::exp(-a));
}

// Row-wise softmax over the lower triangle; entries above the diagonal are 0.
template <typename T, typename Out>
void causal_softmax(Matrix<T>& scores, Out& prob) {
    const Index seq = scores.rows();
    for (Index t = 0; t < seq; ++t) {
        for (Index j = t + 1; j < seq; ++j) scores(t, j) = -std::numeric_limits<T>::infinity();
    }
    const auto mx = scores.rowwise().maxCoeff().eval();
    prob = (scores.colwise() - mx).array().exp().matrix();
    const auto sums = prob.rowwise().sum().eval();
    for (Index t = 0; t < seq; ++t) prob.row(t) /= sums(t);
}

template <typename T>
struct LayerCache {
    Matrix<T> x_in, h1, q, k, v, o, x_mid, h2, a, u, m;
    AlignedVector<T> r1, r2;
    AlignedVector<T> probs;  // [batch][head][S][S]
};

template <typename T>
struct Trace {
    int batch = 0;
    int seq = 0;
    std::vector<Token> inputs;
    std::vector<LayerCache<T>> layers;
    Matrix<T> x_out, hf, logits;
    AlignedVector<T> rf;
};

// Runs the full forward pass; caches everything the reverse pass needs.
template <typename T>
void forward_batch(const Parameters<T>& p, std::span<const Token> inputs, int batch, int seq, Trace<T>& tr) {
    const ModelConfig& cfg = p.config();
    const Layout& lay = p.layout();
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const int kvd = cfg.kv_dim();
    const int group = cfg.n_heads / cfg.n_kv_heads;
    const Index n = static_cast<Index>(batch) * seq;
    require(seq >= 1 && seq <= cfg.context_len, ErrorKind::Precondition, "sequence longer than context_len");
    require(static_cast<Index>(inputs.size()) == n, ErrorKind::Precondition, "input size mismatch");

    tr.batch = batch;
    tr.seq = seq;
    tr.inputs.assign(inputs.begin(), inputs.end());
    tr.layers.resize(static_cast<std::size_t>(cfg.n_layers));

    const auto emb = weight(p, lay.tok_emb());
    Matrix<T> x(n, d);
    for (Index i = 0; i < n; ++i) {
        const Token t = inputs[static_cast<std::size_t>(i)];
        if (t >= cfg.vocab_size) fail(ErrorKind::BadToken, "token id " + std::to_string(t) + " outside vocabulary");
        x.row(i) = emb.row(t);
    }

    const RopeTable rope = rope_table(seq, hd, cfg.rope_base);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerCache<T>& c = tr.layers[static_cast<std::size_t>(l)];
        c.x_in = x;
        rms_forward(c.x_in, p.data(lay.layer(l, Layout::AttnNorm)), c.h1, c.r1);
        c.q.noalias() = c.h1 * weight(p, lay.layer(l, Layout::Wq));
        c.k.noalias() = c.h1 * weight(p, lay.layer(l, Layout::Wk));
        c.v.noalias() = c.h1 * weight(p, lay.layer(l, Layout::Wv));
        apply_rope(c.q, seq, cfg.n_heads, hd, rope, false);
        apply_rope(c.k, seq, cfg.n_kv_heads, hd, rope, false);

        c.o.setZero(n, d);
        c.probs.assign(static_cast<std::size_t>(batch) * cfg.n_heads * seq * seq, T(0));
        Matrix<T> scores(seq, seq);
        for (int b = 0; b < batch; ++b) {
            const Index row0 = static_cast<Index>(b) * seq;
            for (int h = 0; h < cfg.n_heads; ++h) {
                const int kvh = h / group;
                CStrided<T> qh(c.q.data() + row0 * d + h * hd, seq, hd, Eigen::OuterStride<>(d));
                CStrided<T> kh(c.k.data() + row0 * kvd + kvh * hd, seq, hd, Eigen::OuterStride<>(kvd));
                CStrided<T> vh(c.v.data() + row0 * kvd + kvh * hd, seq, hd, Eigen::OuterStride<>(kvd));
                scores.noalias() = (qh * kh.transpose()) * scale;
                MapM<T> prob(c.probs.data() + (static_cast<std::size_t>(b) * cfg.n_heads + h) * seq * seq, seq, seq);
                causal_softmax(scores, prob);
                Strided<T> oh(c.o.data() + row0 * d + h * hd, seq, hd, Eigen::OuterStride<>(d));
                oh.noalias() = prob * vh;
            }
        }
        c.x_mid = c.x_in;
        c.x_mid.noalias() += c.o * weight(p, lay.layer(l, Layout::Wo));

        rms_forward(c.x_mid, p.data(lay.layer(l, Layout::MlpNorm)), c.h2, c.r2);
        c.a.noalias() = c.h2 * weight(p, lay.layer(l, Layout::WGate));
        c.u.noalias() = c.h2 * weight(p, lay.layer(l, Layout::WUp));
        c.m = c.a.array() / ((-c.a.array()).exp() + T(1)) * c.u.array();
        x = c.x_mid;
        x.noalias() += c.m * weight(p, lay.layer(l, Layout::WDown));
    }
    tr.x_out = std::move(x);
    rms_forward(tr.x_out, p.data(lay.final_norm()), tr.hf, tr.rf);
    tr.logits.noalias() = tr.hf * weight(p, lay.lm_head());
}

// Converts logits to (softmax - onehot) / n in place; returns the summed NLL.
template <typename T>
double softmax_xent(Matrix<T>& logits, std::span<const Token> targets, bool want_grad) {
    const Index n = logits.rows();
    const T inv_n = T(1) / static_cast<T>(n);
    double total = 0.0;
    Eigen::Array<T, 1, Eigen::Dynamic> e(logits.cols());
    for (Index i = 0; i < n; ++i) {
        auto row = logits.row(i);
        const Token tgt = targets[static_cast<std::size_t>(i)];
        const T mx = row.maxCoeff();
        e = (row.array() - mx).exp();
        const T sum = e.sum();
        total += static_cast<double>(mx + std::log(sum) - row(tgt));
        if (want_grad) {
            row = e.matrix() * (inv_n / sum);
            row(tgt) -= inv_n;
        }
    }
    return total;
}

template <typename T>
void backward_batch(const Parameters<T>& p, Trace<T>& tr, Parameters<T>& g) {
    const ModelConfig& cfg = p.config();
    const Layout& lay = p.layout();
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const int kvd = cfg.kv_dim();
    const int group = cfg.n_heads / cfg.n_kv_heads;
    const int seq = tr.seq;
    const Index n = tr.x_out.rows();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const RopeTable rope = rope_table(seq, hd, cfg.rope_base);

    const Matrix<T>& dlogits = tr.logits;  // already holds d loss / d logits
    weight(g, lay.lm_head()).noalias() += tr.hf.transpose() * dlogits;
    Matrix<T> dhf = dlogits * weight(p, lay.lm_head()).transpose();
    Matrix<T> dx = Matrix<T>::Zero(n, d);
    rms_backward(dhf, tr.x_out, tr.rf, p.data(lay.final_norm()), dx, g.data(lay.final_norm()));

    Matrix<T> dP(seq, seq);
    Matrix<T> dS(seq, seq);
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerCache<T>& c = tr.layers[static_cast<std::size_t>(l)];

        // MLP block.
        const auto w_down = weight(p, lay.layer(l, Layout::WDown));
        weight(g, lay.layer(l, Layout::WDown)).noalias() += c.m.transpose() * dx;
        Matrix<T> dm = dx * w_down.transpose();
        const auto sig = (((-c.a.array()).exp() + T(1)).inverse()).eval();
        Matrix<T> du = dm.array() * c.a.array() * sig;
        Matrix<T> da = dm.array() * c.u.array() * sig * (T(1) + c.a.array() * (T(1) - sig));
        weight(g, lay.layer(l, Layout::WGate)).noalias() += c.h2.transpose() * da;
        weight(g, lay.layer(l, Layout::WUp)).noalias() += c.h2.transpose() * du;
        Matrix<T> dh2 = da * weight(p, lay.layer(l, Layout::WGate)).transpose();
        dh2.noalias() += du * weight(p, lay.layer(l, Layout::WUp)).transpose();
        rms_backward(dh2, c.x_mid, c.r2, p.data(lay.layer(l, Layout::MlpNorm)), dx,
                     g.data(lay.layer(l, Layout::MlpNorm)));

        // Attention block.
        weight(g, lay.layer(l, Layout::Wo)).noalias() += c.o.transpose() * dx;
        Matrix<T> d_o = dx * weight(p, lay.layer(l, Layout::Wo)).transpose();
        Matrix<T> dq = Matrix<T>::Zero(n, d);
        Matrix<T> dk = Matrix<T>::Zero(n, kvd);
        Matrix<T> dv = Matrix<T>::Zero(n, kvd);
        for (int b = 0; b < tr.batch; ++b) {
            const Index row0 = static_cast<Index>(b) * seq;
            for (int h = 0; h < cfg.n_heads; ++h) {
                const int kvh = h / group;
                CMapM<T> prob(c.probs.data() + (static_cast<std::size_t>(b) * cfg.n_heads + h) * seq * seq, seq, seq);
                CStrided<T> qh(c.q.data() + row0 * d + h * hd, seq, hd, Eigen::OuterStride<>(d));
                CStrided<T> kh(c.k.data() + row0 * kvd + kvh * hd, seq, hd, Eigen::OuterStride<>(kvd));
                CStrided<T> vh(c.v.data() + row0 * kvd + kvh * hd, seq, hd, Eigen::OuterStride<>(kvd));
                CStrided<T> doh(d_o.data() + row0 * d + h * hd, seq, hd, Eigen::OuterStride<>(d));
                Strided<T> dqh(dq.data() + row0 * d + h * hd, seq, hd, Eigen::OuterStride<>(d));
                Strided<T> dkh(dk.data() + row0 * kvd + kvh * hd, seq, hd, Eigen::OuterStride<>(kvd));
                Strided<T> dvh(dv.data() + row0 * kvd + kvh * hd, seq, hd, Eigen::OuterStride<>(kvd));

                dP.noalias() = doh * vh.transpose();
                dvh.noalias() += prob.transpose() * doh;
                for (int t = 0; t < seq; ++t) {
                    const T dot = prob.row(t).head(t + 1).dot(dP.row(t).head(t + 1));
                    for (int j = 0; j <= t; ++j) dS(t, j) = prob(t, j) * (dP(t, j) - dot) * scale;
                    for (int j = t + 1; j < seq; ++j) dS(t, j) = T(0);
                }
                dqh.noalias() += dS * kh;
                dkh.noalias() += dS.transpose() * qh;
            }
        }
        apply_rope(dq, seq, cfg.n_heads, hd, rope, true);
        apply_rope(dk, seq, cfg.n_kv_heads, hd, rope, true);
        weight(g, lay.layer(l, Layout::Wq)).noalias() += c.h1.transpose() * dq;
        weight(g, lay.layer(l, Layout::Wk)).noalias() += c.h1.transpose() * dk;
        weight(g, lay.layer(l, Layout::Wv)).noalias() += c.h1.transpose() * dv;
        Matrix<T> dh1 = dq * weight(p, lay.layer(l, Layout::Wq)).transpose();
        dh1.noalias() += dk * weight(p, lay.layer(l, Layout::Wk)).transpose();
        dh1.noalias() += dv * weight(p, lay.layer(l, Layout::Wv)).transpose();
        rms_backward(dh1, c.x_in, c.r1, p.data(lay.layer(l, Layout::AttnNorm)), dx,
                     g.data(lay.layer(l, Layout::AttnNorm)));
    }

    auto demb = weight(g, lay.tok_emb());
    for (Index i = 0; i < n; ++i) demb.row(tr.inputs[static_cast<std::size_t>(i)]) += dx.row(i);
}

struct StackedBatch {
    std::vector<Token> inputs;
    std::vector<Token> targets;
    int batch = 0;
    int seq = 0;
};

StackedBatch stack_windows(const ModelConfig& cfg, std::span<const std::span<const Token>> windows) {
    require(!windows.empty(), ErrorKind::Precondition, "empty batch");
    StackedBatch sb;
    sb.batch = static_cast<int>(windows.size());
    const std::size_t wlen = windows.front().size();
    sb.seq = cfg.sequence_len(static_cast<int>(wlen));
    require(sb.seq >= 1, ErrorKind::Precondition, "window too short");
    sb.inputs.reserve(windows.size() * static_cast<std::size_t>(sb.seq));
    sb.targets.reserve(sb.inputs.capacity());
    for (const auto& w : windows) {
        require(w.size() == wlen, ErrorKind::Precondition, "windows in a batch must share one length");
        Example ex = make_example(cfg, w);
        sb.inputs.insert(sb.inputs.end(), ex.inputs.begin(), ex.inputs.end());
        sb.targets.insert(sb.targets.end(), ex.targets.begin(), ex.targets.end());
    }
    for (Token t : sb.targets) {
        if (t >= cfg.vocab_size) fail(ErrorKind::BadToken, "target id " + std::to_string(t) + " outside vocabulary");
    }
    return sb;
}

template <typename T>
void put_value(std::ostream& os, T v) {
    std::array<unsigned char, sizeof(T)> b{};
    std::memcpy(b.data(), &v, sizeof(T));
    os.write(reinterpret_cast<const char*>(b.data()), b.size());
}

template <typename T>
T get_value(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) fail(ErrorKind::Format, "truncated checkpoint");
    return v;
}

constexpr std::array<char, 8> kCkptMagic{'D', 'C', 'L', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCkptVersion = 1;

}  // namespace

void ModelConfig::validate() const {
    require(n_layers >= 1 && d_model >= 2 && n_heads >= 1 && n_kv_heads >= 1 && d_ff >= 1 && vocab_size >= 2,
            ErrorKind::BadConfig, "model dimensions must be positive");
    require(d_model % n_heads == 0, ErrorKind::BadConfig, "d_model must be divisible by n_heads");
    require(n_heads % n_kv_heads == 0, ErrorKind::BadConfig, "n_heads must be divisible by n_kv_heads");
    require(head_dim() % 2 == 0, ErrorKind::BadConfig, "rotary embedding needs an even head dimension");
    require(context_len >= 2, ErrorKind::BadConfig, "context_len must be at least 2");
    require(bos_id < vocab_size, ErrorKind::BadConfig, "bos_id outside vocabulary");
    require(init_scale > 0.0 && rope_base > 1.0, ErrorKind::BadConfig, "init_scale and rope_base must be positive");
}

std::size_t ModelConfig::param_count() const noexcept {
    const std::size_t d = static_cast<std::size_t>(d_model);
    const std::size_t v = static_cast<std::size_t>(vocab_size);
    const std::size_t kv = static_cast<std::size_t>(kv_dim());
    const std::size_t ff = static_cast<std::size_t>(d_ff);
    const std::size_t per_layer = 2 * d + 2 * d * d + 2 * d * kv + 3 * d * ff;
    return 2 * v * d + static_cast<std::size_t>(n_layers) * per_layer + d;
}

Layout::Layout(const ModelConfig& config) {
    config.validate();
    const int d = config.d_model;
    auto add = [this](std::string name, std::vector<int> shape) {
        TensorInfo info{std::move(name), std::move(shape), total_, 1};
        for (int s : info.shape) info.size *= static_cast<std::size_t>(s);
        total_ += info.size;
        tensors_.push_back(std::move(info));
    };
    add("tok_emb", {config.vocab_size, d});
    for (int l = 0; l < config.n_layers; ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        add(pre + "attn_norm", {d});
        add(pre + "wq", {d, d});
        add(pre + "wk", {d, config.kv_dim()});
        add(pre + "wv", {d, config.kv_dim()});
        add(pre + "wo", {d, d});
        add(pre + "mlp_norm", {d});
        add(pre + "w_gate", {d, config.d_ff});
        add(pre + "w_up", {d, config.d_ff});
        add(pre + "w_down", {config.d_ff, d});
    }
    add("final_norm", {d});
    add("lm_head", {d, config.vocab_size});
}

const TensorInfo& Layout::find(const std::string& name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) return t;
    }
    fail(ErrorKind::Precondition, "no parameter array named " + name);
}

template <typename T>
bool Parameters<T>::all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
Parameters<T> init_params(const ModelConfig& config, std::uint64_t init_seed) {
    Parameters<T> p(config);
    Rng rng(derive_seed(init_seed, 0x1417));
    const double stddev = std::sqrt(config.init_scale / config.d_model);
    for (const auto& info : p.layout().tensors()) {
        T* ptr = p.data(static_cast<std::size_t>(&info - p.layout().tensors().data()));
        if (info.shape.size() == 1) {
            std::fill(ptr, ptr + info.size, T(1));
        } else {
            for (std::size_t i = 0; i < info.size; ++i) ptr[i] = static_cast<T>(rng.normal() * stddev);
        }
    }
    return p;
}

Example make_example(const ModelConfig& config, std::span<const Token> window) {
    Example ex;
    if (config.bos_id >= 0) {
        ex.inputs.reserve(window.size());
        ex.inputs.push_back(static_cast<Token>(config.bos_id));
        ex.inputs.insert(ex.inputs.end(), window.begin(), window.end() - 1);
        ex.targets.assign(window.begin(), window.end());
    } else {
        ex.inputs.assign(window.begin(), window.end() - 1);
        ex.targets.assign(window.begin() + 1, window.end());
    }
    return ex;
}

template <typename T>
Matrix<T> forward(const Parameters<T>& params, std::span<const Token> tokens) {
    Trace<T> tr;
    forward_batch(params, tokens, 1, static_cast<int>(tokens.size()), tr);
    return std::move(tr.logits);
}

template <typename T>
Matrix<T> batch_logits(const Parameters<T>& params, std::span<const std::span<const Token>> windows,
                       std::vector<Token>* targets) {
    StackedBatch sb = stack_windows(params.config(), windows);
    Trace<T> tr;
    forward_batch(params, sb.inputs, sb.batch, sb.seq, tr);
    if (targets) *targets = std::move(sb.targets);
    return std::move(tr.logits);
}

template <typename T>
double batch_loss(const Parameters<T>& params, std::span<const std::span<const Token>> windows) {
    std::vector<Token> targets;
    Matrix<T> logits = batch_logits(params, windows, &targets);
    const double total = softmax_xent(logits, targets, false);
    return total / static_cast<double>(logits.rows());
}

template <typename T>
LossGrad<T> loss_and_grad(const Parameters<T>& params, std::span<const std::span<const Token>> windows) {
    StackedBatch sb = stack_windows(params.config(), windows);
    Trace<T> tr;
    forward_batch(params, sb.inputs, sb.batch, sb.seq, tr);
    LossGrad<T> out;
    out.loss = softmax_xent(tr.logits, sb.targets, true) / static_cast<double>(tr.logits.rows());
    if (!std::isfinite(out.loss)) fail(ErrorKind::NonFinite, "loss is not finite");
    out.grads = params.zeros_like();
    backward_batch(params, tr, out.grads);
    if (!out.grads.all_finite()) fail(ErrorKind::NonFinite, "gradient is not finite");
    return out;
}

template <typename T>
Decoder<T>::Decoder(const Parameters<T>& params) : params_(&params) {
    const ModelConfig& cfg = params.config();
    k_cache_.assign(static_cast<std::size_t>(cfg.n_layers), Matrix<T>::Zero(cfg.context_len, cfg.kv_dim()));
    v_cache_ = k_cache_;
    logits_.assign(static_cast<std::size_t>(cfg.vocab_size), T(0));
}

template <typename T>
void Decoder<T>::reset() {
    pos_ = 0;
}

template <typename T>
std::span<const T> Decoder<T>::step(Token token) {
    const Parameters<T>& p = *params_;
    const ModelConfig& cfg = p.config();
    const Layout& lay = p.layout();
    require(pos_ < cfg.context_len, ErrorKind::Precondition, "decoder context is full");
    require(token < cfg.vocab_size, ErrorKind::BadToken, "token id outside vocabulary");
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const int group = cfg.n_heads / cfg.n_kv_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const RopeTable rope = rope_table(pos_ + 1, hd, cfg.rope_base);

    Matrix<T> x = weight(p, lay.tok_emb()).row(token);
    Matrix<T> h;
    AlignedVector<T> r;
    AlignedVector<T> scores(static_cast<std::size_t>(pos_ + 1));
    for (int l = 0; l < cfg.n_layers; ++l) {
        rms_forward(x, p.data(lay.layer(l, Layout::AttnNorm)), h, r);
        Matrix<T> q = h * weight(p, lay.layer(l, Layout::Wq));
        Matrix<T> k = h * weight(p, lay.layer(l, Layout::Wk));
        Matrix<T> v = h * weight(p, lay.layer(l, Layout::Wv));
        apply_rope_row(q.data(), cfg.n_heads, hd, rope, pos_, false);
        apply_rope_row(k.data(), cfg.n_kv_heads, hd, rope, pos_, false);
        Matrix<T>& kc = k_cache_[static_cast<std::size_t>(l)];
        Matrix<T>& vc = v_cache_[static_cast<std::size_t>(l)];
        kc.row(pos_) = k.row(0);
        vc.row(pos_) = v.row(0);

        Matrix<T> o = Matrix<T>::Zero(1, d);
        for (int hh = 0; hh < cfg.n_heads; ++hh) {
            const int kvh = hh / group;
            const auto qh = q.row(0).segment(hh * hd, hd);
            T mx = -std::numeric_limits<T>::infinity();
            for (int j = 0; j <= pos_; ++j) {
                scores[static_cast<std::size_t>(j)] = qh.dot(kc.row(j).segment(kvh * hd, hd)) * scale;
                mx = std::max(mx, scores[static_cast<std::size_t>(j)]);
            }
            T sum = T(0);
            for (int j = 0; j <= pos_; ++j) {
                scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
                sum += scores[static_cast<std::size_t>(j)];
            }
            for (int j = 0; j <= pos_; ++j) {
                o.row(0).segment(hh * hd, hd) += (scores[static_cast<std::size_t>(j)] / sum) * vc.row(j).segment(kvh * hd, hd);
            }
        }
        x.noalias() += o * weight(p, lay.layer(l, Layout::Wo));
        rms_forward(x, p.data(lay.layer(l, Layout::MlpNorm)), h, r);
        Matrix<T> a = h * weight(p, lay.layer(l, Layout::WGate));
        Matrix<T> u = h * weight(p, lay.layer(l, Layout::WUp));
        for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = a.data()[i] * sigmoid(a.data()[i]) * u.data()[i];
        x.noalias() += a * weight(p, lay.layer(l, Layout::WDown));
    }
    rms_forward(x, p.data(lay.final_norm()), h, r);
    Eigen::Map<Matrix<T>>(logits_.data(), 1, cfg.vocab_size).noalias() = h * weight(p, lay.lm_head());
    ++pos_;
    return logits_;
}

template <typename T>
Token pick_token(std::span<const T> logits, double temperature, double uniform01) {
    require(!logits.empty(), ErrorKind::Precondition, "empty logit row");
    if (temperature <= 0.0) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.size(); ++j) {
            if (logits[j] > logits[best]) best = j;
        }
        return static_cast<Token>(best);
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : logits) mx = std::max(mx, static_cast<double>(v) / temperature);
    std::vector<double> cdf(logits.size());
    double acc = 0.0;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        acc += std::exp(static_cast<double>(logits[j]) / temperature - mx);
        cdf[j] = acc;
    }
    const double target = uniform01 * acc;
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), target);
    std::size_t idx = static_cast<std::size_t>(it - cdf.begin());
    if (idx >= cdf.size()) idx = cdf.size() - 1;
    return static_cast<Token>(idx);
}

template <typename T>
std::vector<Token> sample(const Parameters<T>& params, std::size_t n_tokens, double temperature,
                          std::uint64_t sample_seed) {
    require(n_tokens >= 1, ErrorKind::Precondition, "n_tokens must be >= 1");
    require(temperature >= 0.0, ErrorKind::Precondition, "temperature must be >= 0");
    const ModelConfig& cfg = params.config();
    const Token start = static_cast<Token>(cfg.bos_id >= 0 ? cfg.bos_id : 0);
    Rng rng(derive_seed(sample_seed, 0x5A4D));
    Decoder<T> dec(params);
    std::vector<Token> out;
    out.reserve(n_tokens);
    AlignedVector<T> row;
    while (out.size() < n_tokens) {
        dec.reset();
        auto logits = dec.step(start);
        for (int i = 0; i < cfg.context_len && out.size() < n_tokens; ++i) {
            row.assign(logits.begin(), logits.end());
            if (cfg.bos_id >= 0) row[static_cast<std::size_t>(cfg.bos_id)] = -std::numeric_limits<T>::infinity();
            const Token tok = pick_token<T>(row, temperature, rng.uniform());
            out.push_back(tok);
            if (i + 1 < cfg.context_len && out.size() < n_tokens) logits = dec.step(tok);
        }
    }
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const Parameters<float>& params, std::uint64_t init_seed,
                     std::uint64_t step) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorKind::Io, "cannot write " + path.string());
    const ModelConfig& c = params.config();
    os.write(kCkptMagic.data(), kCkptMagic.size());
    put_value<std::uint32_t>(os, kCkptVersion);
    for (int v : {c.n_layers, c.d_model, c.n_heads, c.n_kv_heads, c.d_ff, c.context_len, c.vocab_size, c.bos_id}) {
        put_value<std::int32_t>(os, v);
    }
    put_value<double>(os, c.init_scale);
    put_value<double>(os, c.rope_base);
    put_value<std::uint64_t>(os, init_seed);
    put_value<std::uint64_t>(os, step);
    put_value<std::uint64_t>(os, params.size());
    for (float v : params.values()) put_value<float>(os, v);
    if (!os) fail(ErrorKind::Io, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::Io, "cannot read " + path.string());
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kCkptMagic) fail(ErrorKind::Format, "bad checkpoint magic in " + path.string());
    if (get_value<std::uint32_t>(is) != kCkptVersion) fail(ErrorKind::Format, "unsupported checkpoint version");
    ModelConfig c;
    c.n_layers = get_value<std::int32_t>(is);
    c.d_model = get_value<std::int32_t>(is);
    c.n_heads = get_value<std::int32_t>(is);
    c.n_kv_heads = get_value<std::int32_t>(is);
    c.d_ff = get_value<std::int32_t>(is);
    c.context_len = get_value<std::int32_t>(is);
    c.vocab_size = get_value<std::int32_t>(is);
    c.bos_id = get_value<std::int32_t>(is);
    c.init_scale = get_value<double>(is);
    c.rope_base = get_value<double>(is);
    Checkpoint ck;
    ck.init_seed = get_value<std::uint64_t>(is);
    ck.step = get_value<std::uint64_t>(is);
    const auto n = get_value<std::uint64_t>(is);
    ck.params = Parameters<float>(c);
    if (n != ck.params.size()) fail(ErrorKind::Format, "checkpoint array size does not match its config");
    for (float& v : ck.params.values()) v = get_value<float>(is);
    return ck;
}

#define DCLAB_INSTANTIATE(T)                                                                                      \
    template class Parameters<T>;                                                                                 \
    template Parameters<T> init_params<T>(const ModelConfig&, std::uint64_t);                                    \
    template Matrix<T> forward<T>(const Parameters<T>&, std::span<const Token>);                                 \
    template Matrix<T> batch_logits<T>(const Parameters<T>&, std::span<const std::span<const Token>>,            \
                                       std::vector<Token>*);                                                      \
    template double batch_loss<T>(const Parameters<T>&, std::span<const std::span<const Token>>);                \
    template LossGrad<T> loss_and_grad<T>(const Parameters<T>&, std::span<const std::span<const Token>>);        \
    template class Decoder<T>;                                                                                    \
    template Token pick_token<T>(std::span<const T>, double, double);                                            \
    template std::vector<Token> sample<T>(const Parameters<T>&, std::size_t, double, std::uint64_t);

DCLAB_INSTANTIATE(float)
DCLAB_INSTANTIATE(double)

#undef DCLAB_INSTANTIATE

}  // namespace dclab::model
