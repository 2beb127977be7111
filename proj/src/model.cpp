#include "pivot/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pivot {

using nlohmann::json;

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

void accumulate(Matrix& dst, const Matrix& src) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

Matrix row_vector(std::size_t n, double fill) { return Matrix(1, n, fill); }

Matrix xavier(std::size_t in, std::size_t out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-limit, limit);
    Matrix m(in, out);
    for (auto& x : m.data) x = u(rng);
    return m;
}

// ------------------------------------------------------------ primitives

void linear(const Matrix& x, const Matrix& w, const Matrix& b, Matrix& y) {
    kernels::matmul(x, w, y);
    kernels::add_row_bias(y, b.data);
}

// dy -> dx, accumulating dW and db.
void linear_backward(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix& dw, Matrix& db, Matrix* dx) {
    Matrix tmp;
    kernels::matmul_tn(x, dy, tmp);
    accumulate(dw, tmp);
    kernels::add_column_sums(dy, db.data);
    if (dx) kernels::matmul_nt(dy, w, *dx);
}

void layer_norm(const Matrix& x, const Matrix& g, const Matrix& b, Matrix& xhat, std::vector<double>& rstd, Matrix& y) {
    const std::size_t n = x.rows;
    const std::size_t d = x.cols;
    xhat = Matrix(n, d);
    y = Matrix(n, d);
    rstd.assign(n, 0.0);
    const auto rows = static_cast<std::ptrdiff_t>(n);
    [[maybe_unused]] const bool par = kernels::parallel_worthwhile(n * d * 8);
#pragma omp parallel for schedule(static) if (par)
    for (std::ptrdiff_t ri = 0; ri < rows; ++ri) {
        const auto r = static_cast<std::size_t>(ri);
        const double* xr = &x.data[r * d];
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
        rstd[r] = rs;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mean) * rs;
            xhat.data[r * d + j] = h;
            y.data[r * d + j] = h * g.data[j] + b.data[j];
        }
    }
}

void layer_norm_backward(const Matrix& xhat, const std::vector<double>& rstd, const Matrix& g, const Matrix& dy,
                         Matrix& dg, Matrix& db, Matrix& dx) {
    const std::size_t n = xhat.rows;
    const std::size_t d = xhat.cols;
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            dg.data[j] += dy.data[r * d + j] * xhat.data[r * d + j];
            db.data[j] += dy.data[r * d + j];
        }
    }
    dx = Matrix(n, d);
    const auto rows = static_cast<std::ptrdiff_t>(n);
    [[maybe_unused]] const bool par = kernels::parallel_worthwhile(n * d * 8);
#pragma omp parallel for schedule(static) if (par)
    for (std::ptrdiff_t ri = 0; ri < rows; ++ri) {
        const auto r = static_cast<std::size_t>(ri);
        double mean_dh = 0.0;
        double mean_dh_h = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double dh = dy.data[r * d + j] * g.data[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat.data[r * d + j];
        }
        mean_dh /= static_cast<double>(d);
        mean_dh_h /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const double dh = dy.data[r * d + j] * g.data[j];
            dx.data[r * d + j] = rstd[r] * (dh - mean_dh - xhat.data[r * d + j] * mean_dh_h);
        }
    }
}

Matrix dropout_mask(std::size_t rows, std::size_t cols, double rate, Rng* rng) {
    if (!rng || rate <= 0.0) return {};
    Matrix m(rows, cols);
    std::bernoulli_distribution keep(1.0 - rate);
    const double scale = 1.0 / (1.0 - rate);
    for (auto& x : m.data) x = keep(*rng) ? scale : 0.0;
    return m;
}

void apply_mask(Matrix& x, const Matrix& mask) {
    if (mask.data.empty()) return;
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] *= mask.data[i];
}

double sinusoid(std::size_t pos, std::size_t j, std::size_t d) {
    const double rate = std::pow(10000.0, -static_cast<double>(j - j % 2) / static_cast<double>(d));
    return j % 2 == 0 ? std::sin(static_cast<double>(pos) * rate) : std::cos(static_cast<double>(pos) * rate);
}

// Inputs are scaled by sqrt(d) before the positional encoding is added.
double input_scale(std::size_t d) { return std::sqrt(static_cast<double>(d)); }

using Segment = ForwardState::Segment;

} // namespace

// ------------------------------------------------------------ encoder layer

struct LayerCache {
    Matrix x;
    Matrix xhat1;
    std::vector<double> rstd1;
    Matrix a, q, k, v;
    std::vector<Matrix> probs; // segment-major, then head
    Matrix ctx;
    Matrix drop1;
    Matrix r1;
    Matrix xhat2;
    std::vector<double> rstd2;
    Matrix bn;
    Matrix ff_pre, ff_act;
    Matrix drop2;
    Matrix out;
};

namespace {

void layer_forward(const EncoderLayerParams& p, const ModelConfig& cfg, const Matrix& x, std::span<const Segment> segs,
                   Rng* rng, LayerCache& c) {
    const std::size_t n = x.rows;
    const std::size_t d = cfg.dim;
    const std::size_t nh = cfg.heads;
    const std::size_t dh = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    c.x = x;
    layer_norm(x, p.ln1_g, p.ln1_b, c.xhat1, c.rstd1, c.a);
    linear(c.a, p.wq, p.bq, c.q);
    linear(c.a, p.wk, p.bk, c.k);
    linear(c.a, p.wv, p.bv, c.v);

    c.ctx = Matrix(n, d);
    c.probs.assign(segs.size() * nh, Matrix{});
    const auto jobs = static_cast<std::ptrdiff_t>(segs.size() * nh);
    std::size_t work = 0;
    for (const auto& s : segs) work += s.length * s.length * d;
    [[maybe_unused]] const bool par = kernels::parallel_worthwhile(work);
    // Each (segment, head) job owns a disjoint block of ctx.
#pragma omp parallel for schedule(dynamic) if (par)
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
        const auto si = static_cast<std::size_t>(job) / nh;
        const auto h = static_cast<std::size_t>(job) % nh;
        const auto [o, len] = segs[si];
        Matrix& pr = c.probs[static_cast<std::size_t>(job)];
        pr = Matrix(len, len);
        for (std::size_t i = 0; i < len; ++i) {
            const double* qi = &c.q.data[(o + i) * d + h * dh];
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < len; ++j) {
                const double* kj = &c.k.data[(o + j) * d + h * dh];
                double s = 0.0;
                for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
                s *= scale;
                pr(i, j) = s;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                pr(i, j) = std::exp(pr(i, j) - mx);
                z += pr(i, j);
            }
            for (std::size_t j = 0; j < len; ++j) pr(i, j) /= z;
            double* ci = &c.ctx.data[(o + i) * d + h * dh];
            for (std::size_t j = 0; j < len; ++j) {
                const double pij = pr(i, j);
                const double* vj = &c.v.data[(o + j) * d + h * dh];
                for (std::size_t t = 0; t < dh; ++t) ci[t] += pij * vj[t];
            }
        }
    }

    Matrix attn;
    linear(c.ctx, p.wo, p.bo, attn);
    c.drop1 = dropout_mask(n, d, cfg.dropout, rng);
    apply_mask(attn, c.drop1);
    c.r1 = x;
    accumulate(c.r1, attn);

    layer_norm(c.r1, p.ln2_g, p.ln2_b, c.xhat2, c.rstd2, c.bn);
    linear(c.bn, p.w1, p.b1, c.ff_pre);
    c.ff_act = c.ff_pre;
    for (auto& z : c.ff_act.data) z = std::max(z, 0.0);
    Matrix ff;
    linear(c.ff_act, p.w2, p.b2, ff);
    c.drop2 = dropout_mask(n, d, cfg.dropout, rng);
    apply_mask(ff, c.drop2);
    c.out = c.r1;
    accumulate(c.out, ff);
}

// Returns dX; accumulates into g.
Matrix layer_backward(const EncoderLayerParams& p, const ModelConfig& cfg, const LayerCache& c,
                      std::span<const Segment> segs, const Matrix& dout, EncoderLayerParams& g) {
    const std::size_t n = c.x.rows;
    const std::size_t d = cfg.dim;
    const std::size_t nh = cfg.heads;
    const std::size_t dh = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // out = r1 + drop2 * (relu(bn W1 + b1) W2 + b2)
    Matrix dff = dout;
    apply_mask(dff, c.drop2);
    Matrix dact;
    linear_backward(c.ff_act, p.w2, dff, g.w2, g.b2, &dact);
    for (std::size_t i = 0; i < dact.data.size(); ++i)
        if (c.ff_pre.data[i] <= 0.0) dact.data[i] = 0.0;
    Matrix dbn;
    linear_backward(c.bn, p.w1, dact, g.w1, g.b1, &dbn);
    Matrix dr1;
    layer_norm_backward(c.xhat2, c.rstd2, p.ln2_g, dbn, g.ln2_g, g.ln2_b, dr1);
    accumulate(dr1, dout);

    // r1 = x + drop1 * (ctx Wo + bo)
    Matrix dattn = dr1;
    apply_mask(dattn, c.drop1);
    Matrix dctx;
    linear_backward(c.ctx, p.wo, dattn, g.wo, g.bo, &dctx);

    Matrix dq(n, d), dk(n, d), dv(n, d);
    const auto jobs = static_cast<std::ptrdiff_t>(segs.size() * nh);
    std::size_t work = 0;
    for (const auto& s : segs) work += s.length * s.length * d;
    [[maybe_unused]] const bool par = kernels::parallel_worthwhile(work);
#pragma omp parallel for schedule(dynamic) if (par)
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
        const auto si = static_cast<std::size_t>(job) / nh;
        const auto h = static_cast<std::size_t>(job) % nh;
        const auto [o, len] = segs[si];
        const Matrix& pr = c.probs[static_cast<std::size_t>(job)];
        Matrix dp(len, len);
        for (std::size_t i = 0; i < len; ++i) {
            const double* dci = &dctx.data[(o + i) * d + h * dh];
            for (std::size_t j = 0; j < len; ++j) {
                const double* vj = &c.v.data[(o + j) * d + h * dh];
                double s = 0.0;
                for (std::size_t t = 0; t < dh; ++t) s += dci[t] * vj[t];
                dp(i, j) = s;
            }
        }
        for (std::size_t j = 0; j < len; ++j) {
            double* dvj = &dv.data[(o + j) * d + h * dh];
            for (std::size_t i = 0; i < len; ++i) {
                const double pij = pr(i, j);
                const double* dci = &dctx.data[(o + i) * d + h * dh];
                for (std::size_t t = 0; t < dh; ++t) dvj[t] += pij * dci[t];
            }
        }
        // softmax backward -> scores
        Matrix ds(len, len);
        for (std::size_t i = 0; i < len; ++i) {
            double dot_pd = 0.0;
            for (std::size_t j = 0; j < len; ++j) dot_pd += pr(i, j) * dp(i, j);
            for (std::size_t j = 0; j < len; ++j) ds(i, j) = pr(i, j) * (dp(i, j) - dot_pd) * scale;
        }
        for (std::size_t i = 0; i < len; ++i) {
            double* dqi = &dq.data[(o + i) * d + h * dh];
            for (std::size_t j = 0; j < len; ++j) {
                const double* kj = &c.k.data[(o + j) * d + h * dh];
                for (std::size_t t = 0; t < dh; ++t) dqi[t] += ds(i, j) * kj[t];
            }
        }
        for (std::size_t j = 0; j < len; ++j) {
            double* dkj = &dk.data[(o + j) * d + h * dh];
            for (std::size_t i = 0; i < len; ++i) {
                const double* qi = &c.q.data[(o + i) * d + h * dh];
                for (std::size_t t = 0; t < dh; ++t) dkj[t] += ds(i, j) * qi[t];
            }
        }
    }

    Matrix da, tmp;
    linear_backward(c.a, p.wq, dq, g.wq, g.bq, &da);
    linear_backward(c.a, p.wk, dk, g.wk, g.bk, &tmp);
    accumulate(da, tmp);
    linear_backward(c.a, p.wv, dv, g.wv, g.bv, &tmp);
    accumulate(da, tmp);
    Matrix dx;
    layer_norm_backward(c.xhat1, c.rstd1, p.ln1_g, da, g.ln1_g, g.ln1_b, dx);
    accumulate(dx, dr1);
    return dx;
}

void head_forward(const MlpHeadParams& h, const Matrix& x, Matrix& pre, Matrix& act, Matrix& logits) {
    linear(x, h.w1, h.b1, pre);
    act = pre;
    for (auto& z : act.data) z = std::max(z, 0.0);
    linear(act, h.w2, h.b2, logits);
}

Matrix head_backward(const MlpHeadParams& h, const Matrix& x, const Matrix& pre, const Matrix& act,
                     const Matrix& dlogits, MlpHeadParams& g) {
    Matrix dact;
    linear_backward(act, h.w2, dlogits, g.w2, g.b2, &dact);
    for (std::size_t i = 0; i < dact.data.size(); ++i)
        if (pre.data[i] <= 0.0) dact.data[i] = 0.0;
    Matrix dx;
    linear_backward(x, h.w1, dact, g.w1, g.b1, &dx);
    return dx;
}

template <typename Layer, typename F>
void visit_layer(Layer& l, const std::string& prefix, F&& f) {
    f(prefix + "ln1_g", l.ln1_g);
    f(prefix + "ln1_b", l.ln1_b);
    f(prefix + "wq", l.wq);
    f(prefix + "bq", l.bq);
    f(prefix + "wk", l.wk);
    f(prefix + "bk", l.bk);
    f(prefix + "wv", l.wv);
    f(prefix + "bv", l.bv);
    f(prefix + "wo", l.wo);
    f(prefix + "bo", l.bo);
    f(prefix + "ln2_g", l.ln2_g);
    f(prefix + "ln2_b", l.ln2_b);
    f(prefix + "w1", l.w1);
    f(prefix + "b1", l.b1);
    f(prefix + "w2", l.w2);
    f(prefix + "b2", l.b2);
}

template <typename Head, typename F>
void visit_head(Head& h, const std::string& prefix, F&& f) {
    f(prefix + "w1", h.w1);
    f(prefix + "b1", h.b1);
    f(prefix + "w2", h.w2);
    f(prefix + "b2", h.b2);
}

template <typename Params, typename F>
void visit_params(Params& p, F&& f) {
    visit_layer(p.layer1, "layer1.", f);
    if (p.layer2) visit_layer(*p.layer2, "layer2.", f);
    if (p.cls) f(std::string("cls"), *p.cls);
    if (p.mask) f(std::string("mask"), *p.mask);
    if (p.step_head) visit_head(*p.step_head, "step_head.", f);
    for (std::size_t l = 0; l < p.path_heads.size(); ++l) visit_head(p.path_heads[l], "path_head" + std::to_string(l + 1) + ".", f);
}

} // namespace

// ------------------------------------------------------------ config

std::string to_string(Pooling p) { return p == Pooling::mean ? "mean" : "tfenc"; }

Pooling parse_pooling(std::string_view s) {
    if (s == "mean") return Pooling::mean;
    if (s == "tfenc") return Pooling::tfenc;
    throw ValidationError("unknown pooling mode '" + std::string(s) + "' (expected mean or tfenc)");
}

void ModelConfig::validate() const {
    if (dim == 0 || heads == 0) throw ValidationError("model config: dim and heads must be positive");
    if (dim % heads != 0) {
        throw ValidationError("model config: dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
    }
    if (ff_dim == 0 || head_hidden == 0) throw ValidationError("model config: layer widths must be positive");
    for (auto s : path_sizes)
        if (s == 0) throw ValidationError("model config: path head sizes must be positive");
    if (max_seq_len < 2) throw ValidationError("model config: max_seq_len must be at least 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("model config: dropout must be in [0, 1)");
    if (cls_token && pooling != Pooling::tfenc) throw ValidationError("model config: cls_token requires tfenc pooling");
}

json to_json(const ModelConfig& c) {
    return {{"dim", c.dim},
            {"heads", c.heads},
            {"ff_dim", c.ff_dim},
            {"head_hidden", c.head_hidden},
            {"pooling", to_string(c.pooling)},
            {"num_steps", c.num_steps},
            {"path_sizes", c.path_sizes},
            {"max_seq_len", c.max_seq_len},
            {"dropout", c.dropout},
            {"positional_encoding", c.positional_encoding},
            {"cls_token", c.cls_token},
            {"mask_token", c.mask_token},
            {"purpose", c.purpose}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    try {
        c.dim = j.at("dim").get<std::size_t>();
        c.heads = j.at("heads").get<std::size_t>();
        c.ff_dim = j.at("ff_dim").get<std::size_t>();
        c.head_hidden = j.at("head_hidden").get<std::size_t>();
        c.pooling = parse_pooling(j.at("pooling").get<std::string>());
        c.num_steps = j.at("num_steps").get<std::size_t>();
        c.path_sizes = j.at("path_sizes").get<std::vector<std::size_t>>();
        c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
        c.dropout = j.at("dropout").get<double>();
        c.positional_encoding = j.at("positional_encoding").get<bool>();
        c.cls_token = j.at("cls_token").get<bool>();
        c.mask_token = j.at("mask_token").get<bool>();
        c.purpose = j.at("purpose").get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

// ------------------------------------------------------------ params

std::vector<std::pair<std::string, Matrix*>> ModelParams::blocks() {
    std::vector<std::pair<std::string, Matrix*>> out;
    visit_params(*this, [&](const std::string& name, Matrix& m) { out.emplace_back(name, &m); });
    return out;
}

std::vector<std::pair<std::string, const Matrix*>> ModelParams::blocks() const {
    std::vector<std::pair<std::string, const Matrix*>> out;
    visit_params(*this, [&](const std::string& name, const Matrix& m) { out.emplace_back(name, &m); });
    return out;
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : blocks()) n += m->size();
    return n;
}

ModelParams ModelParams::zeros_like() const {
    ModelParams z = *this;
    for (auto& [name, m] : z.blocks()) m->zero();
    return z;
}

void ModelParams::round_to_float32() {
    for (auto& [name, m] : blocks())
        for (auto& x : m->data) x = static_cast<double>(static_cast<float>(x));
}

EncoderLayerParams init_encoder_layer(const ModelConfig& c, Rng& rng) {
    const std::size_t d = c.dim;
    EncoderLayerParams p;
    p.ln1_g = row_vector(d, 1.0);
    p.ln1_b = row_vector(d, 0.0);
    p.wq = xavier(d, d, rng);
    p.bq = row_vector(d, 0.0);
    p.wk = xavier(d, d, rng);
    p.bk = row_vector(d, 0.0);
    p.wv = xavier(d, d, rng);
    p.bv = row_vector(d, 0.0);
    p.wo = xavier(d, d, rng);
    p.bo = row_vector(d, 0.0);
    p.ln2_g = row_vector(d, 1.0);
    p.ln2_b = row_vector(d, 0.0);
    p.w1 = xavier(d, c.ff_dim, rng);
    p.b1 = row_vector(c.ff_dim, 0.0);
    p.w2 = xavier(c.ff_dim, d, rng);
    p.b2 = row_vector(d, 0.0);
    return p;
}

MlpHeadParams init_head(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    return {xavier(in, hidden, rng), row_vector(hidden, 0.0), xavier(hidden, out, rng), row_vector(out, 0.0)};
}

ModelParams init_params(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    Rng rng(derive_seed(seed, std::string_view("init")));
    ModelParams p;
    p.layer1 = init_encoder_layer(c, rng);
    if (c.pooling == Pooling::tfenc) p.layer2 = init_encoder_layer(c, rng);
    if (c.cls_token) {
        std::normal_distribution<double> g(0.0, 0.02);
        Matrix cls(1, c.dim);
        for (auto& x : cls.data) x = g(rng);
        p.cls = std::move(cls);
    }
    if (c.mask_token) p.mask = Matrix(1, c.dim, 0.0);
    if (c.num_steps > 0) p.step_head = init_head(c.dim, c.head_hidden, c.num_steps, rng);
    for (auto s : c.path_sizes) p.path_heads.push_back(init_head(c.dim, c.head_hidden, s, rng));
    return p;
}

// ------------------------------------------------------------ batch

std::size_t Batch::positions() const {
    std::size_t n = 0;
    for (auto l : lengths) n += l;
    return n;
}

void Batch::validate(const ModelConfig& c) const {
    const std::size_t B = lengths.size();
    if (B == 0) throw ValidationError("batch: empty");
    if (dim != c.dim) throw ValidationError("batch: dimension " + std::to_string(dim) + " does not match model " + std::to_string(c.dim));
    if (max_len > c.max_seq_len) {
        throw ValidationError("batch: sequence length " + std::to_string(max_len) + " exceeds max_seq_len " +
                              std::to_string(c.max_seq_len) + "; truncate sequences before batching");
    }
    for (auto l : lengths) {
        if (l == 0) throw ValidationError("batch: every video needs at least one valid clip");
        if (l > max_len) throw ValidationError("batch: length exceeds max_len");
    }
    if (clips.rows != B * max_len || clips.cols != dim) throw ValidationError("batch: clip tensor has the wrong shape");
    if (!masked.empty() && masked.size() != B * max_len) throw ValidationError("batch: mask flags have the wrong size");
    if (!step_targets.data.empty() && (step_targets.rows != B * max_len || step_targets.cols != c.num_steps)) {
        throw ValidationError("batch: step targets have the wrong shape");
    }
    if (!step_class.empty() && step_class.size() != B * max_len) throw ValidationError("batch: step classes have the wrong size");
    if (!path_targets.empty() && path_targets.size() != B) throw ValidationError("batch: path targets have the wrong size");
}

Batch make_batch(std::span<const SequenceExample> examples, const ModelConfig& c) {
    Batch b;
    b.dim = c.dim;
    for (const auto& e : examples) b.max_len = std::max(b.max_len, e.clips.size());
    const std::size_t B = examples.size();
    b.clips = Matrix(B * b.max_len, c.dim);
    bool any_mask = false, any_multi = false, any_class = false;
    for (const auto& e : examples) {
        any_mask |= !e.masked.empty();
        any_multi |= !e.step_labels.empty();
        any_class |= !e.step_class.empty();
    }
    if (any_mask) b.masked.assign(B * b.max_len, 0);
    if (any_multi) b.step_targets = Matrix(B * b.max_len, c.num_steps);
    if (any_class) b.step_class.assign(B * b.max_len, -1);
    for (std::size_t v = 0; v < B; ++v) {
        const auto& e = examples[v];
        b.lengths.push_back(e.clips.size());
        for (std::size_t i = 0; i < e.clips.size(); ++i) {
            const std::size_t row = v * b.max_len + i;
            if (e.clips[i].size() != c.dim) {
                throw ValidationError("make_batch: clip of dimension " + std::to_string(e.clips[i].size()) +
                                      ", model dimension is " + std::to_string(c.dim));
            }
            std::copy(e.clips[i].begin(), e.clips[i].end(), b.clips.row(row).begin());
            if (!e.masked.empty()) b.masked[row] = e.masked[i];
            if (!e.step_labels.empty()) {
                for (int s : e.step_labels[i]) {
                    if (s < 0 || static_cast<std::size_t>(s) >= c.num_steps) {
                        throw ValidationError("make_batch: step target " + std::to_string(s) + " out of range");
                    }
                    b.step_targets(row, static_cast<std::size_t>(s)) = 1.0;
                }
            }
            if (!e.step_class.empty()) b.step_class[row] = e.step_class[i];
        }
        b.path_targets.push_back(e.path_targets);
    }
    b.validate(c);
    return b;
}

// ------------------------------------------------------------ forward

std::vector<std::uint8_t> ForwardState::relu_signature() const {
    std::vector<std::uint8_t> sig;
    auto add = [&](const Matrix& m) {
        for (double z : m.data) sig.push_back(z > 0.0);
    };
    if (layer1) add(layer1->ff_pre);
    if (layer2) add(layer2->ff_pre);
    add(step_hidden_pre);
    for (const auto& m : path_hidden_pre) add(m);
    return sig;
}

ForwardState forward(const ModelParams& params, const ModelConfig& c, const Batch& batch, Rng* rng) {
    batch.validate(c);
    const std::size_t d = c.dim;
    const std::size_t B = batch.batch_size();
    ForwardState f;
    f.packed_row.assign(B * batch.max_len, npos);
    std::size_t P = 0;
    for (std::size_t b = 0; b < B; ++b) {
        f.segments.push_back({P, batch.lengths[b]});
        for (std::size_t i = 0; i < batch.lengths[b]; ++i) f.packed_row[b * batch.max_len + i] = P + i;
        P += batch.lengths[b];
    }

    f.x0 = Matrix(P, d);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < batch.lengths[b]; ++i) {
            const std::size_t src = b * batch.max_len + i;
            const std::size_t dst = f.packed_row[src];
            const bool is_masked = !batch.masked.empty() && batch.masked[src];
            if (is_masked && !params.mask) throw ValidationError("forward: batch masks positions but the model has no mask token");
            const auto in = is_masked ? params.mask->row(0) : batch.clips.row(src);
            for (std::size_t j = 0; j < d; ++j) {
                f.x0(dst, j) = in[j] * input_scale(d) + (c.positional_encoding ? sinusoid(i, j, d) : 0.0);
            }
        }
    }

    f.layer1 = std::make_shared<LayerCache>();
    layer_forward(params.layer1, c, f.x0, f.segments, rng, *f.layer1);
    f.h1 = f.layer1->out;

    f.pooled = Matrix(B, d);
    if (c.pooling == Pooling::mean) {
        for (std::size_t b = 0; b < B; ++b) {
            const auto [o, len] = f.segments[b];
            for (std::size_t i = 0; i < len; ++i)
                for (std::size_t j = 0; j < d; ++j) f.pooled(b, j) += f.h1(o + i, j);
            for (std::size_t j = 0; j < d; ++j) f.pooled(b, j) /= static_cast<double>(len);
        }
    } else {
        if (!params.layer2) throw ValidationError("forward: tfenc pooling requires a second encoder layer");
        const std::size_t extra = params.cls ? 1 : 0;
        Matrix z(P + extra * B, d);
        std::size_t off = 0;
        for (std::size_t b = 0; b < B; ++b) {
            const auto [o, len] = f.segments[b];
            f.segments2.push_back({off, len + extra});
            if (extra) std::copy(params.cls->data.begin(), params.cls->data.end(), z.row(off).begin());
            for (std::size_t i = 0; i < len; ++i) std::copy(f.h1.row(o + i).begin(), f.h1.row(o + i).end(), z.row(off + extra + i).begin());
            off += len + extra;
        }
        f.layer2 = std::make_shared<LayerCache>();
        layer_forward(*params.layer2, c, z, f.segments2, rng, *f.layer2);
        for (std::size_t b = 0; b < B; ++b) {
            const auto first = f.layer2->out.row(f.segments2[b].offset);
            std::copy(first.begin(), first.end(), f.pooled.row(b).begin());
        }
    }

    if (params.step_head) head_forward(*params.step_head, f.h1, f.step_hidden_pre, f.step_hidden, f.step_logits);
    for (const auto& h : params.path_heads) {
        f.path_hidden_pre.emplace_back();
        f.path_hidden.emplace_back();
        f.path_logits.emplace_back();
        head_forward(h, f.pooled, f.path_hidden_pre.back(), f.path_hidden.back(), f.path_logits.back());
    }
    return f;
}

Matrix encoder_forward(const ModelParams& params, const ModelConfig& c, const Batch& batch) {
    const auto f = forward(params, c, batch);
    Matrix out(batch.batch_size() * batch.max_len, c.dim);
    for (std::size_t r = 0; r < f.packed_row.size(); ++r) {
        if (f.packed_row[r] == npos) continue;
        const auto src = f.h1.row(f.packed_row[r]);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

Matrix pool_video(const ModelParams& params, const ModelConfig& c, const Batch& batch) {
    return forward(params, c, batch).pooled;
}

// ------------------------------------------------------------ losses

namespace {

double bce_with_logits(double z, double y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// Softmax cross-entropy of one row; writes (softmax - onehot) * scale into grad if non-null.
double softmax_ce(std::span<const double> z, int target, double scale, std::span<double> grad) {
    if (target < 0 || static_cast<std::size_t>(target) >= z.size()) {
        throw ValidationError("cross-entropy target " + std::to_string(target) + " out of range for " +
                              std::to_string(z.size()) + " classes");
    }
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    if (!grad.empty()) {
        for (std::size_t j = 0; j < z.size(); ++j) grad[j] = std::exp(z[j] - lse) * scale;
        grad[static_cast<std::size_t>(target)] -= scale;
    }
    return lse - z[static_cast<std::size_t>(target)];
}

} // namespace

Losses pretrain_losses(const ForwardState& f, const Batch& batch, const LossWeights& w, LossGradients* g) {
    const std::size_t B = batch.batch_size();
    const double inv_b = 1.0 / static_cast<double>(B);
    Losses L;
    if (!f.step_logits.data.empty() && !batch.step_targets.data.empty()) {
        const std::size_t S = f.step_logits.cols;
        if (g) g->d_step_logits = Matrix(f.step_logits.rows, S);
        double total = 0.0;
        for (std::size_t r = 0; r < f.packed_row.size(); ++r) {
            const std::size_t p = f.packed_row[r];
            if (p == npos) continue;
            for (std::size_t j = 0; j < S; ++j) {
                const double z = f.step_logits(p, j);
                const double y = batch.step_targets(r, j);
                total += bce_with_logits(z, y);
                if (g) g->d_step_logits(p, j) = (sigmoid(z) - y) * (w.step * inv_b);
            }
        }
        L.step = total * inv_b;
    }
    if (!f.path_logits.empty()) {
        if (g) {
            g->d_path_logits.clear();
            for (const auto& m : f.path_logits) g->d_path_logits.emplace_back(m.rows, m.cols);
        }
        double total = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
            const auto& targets = batch.path_targets.empty() ? std::vector<int>{} : batch.path_targets[b];
            for (std::size_t l = 0; l < f.path_logits.size() && l < targets.size(); ++l) {
                if (targets[l] < 0) continue;
                std::span<double> grad;
                if (g) grad = g->d_path_logits[l].row(b);
                total += softmax_ce(f.path_logits[l].row(b), targets[l], w.path * inv_b, grad);
            }
        }
        L.path = total * inv_b;
    }
    L.joint = w.step * L.step + w.path * L.path;
    return L;
}

Losses classification_losses(const ForwardState& f, const Batch& batch, LossGradients* g) {
    const std::size_t B = batch.batch_size();
    const double inv_b = 1.0 / static_cast<double>(B);
    Losses L;
    if (!f.step_logits.data.empty() && !batch.step_class.empty()) {
        if (g) g->d_step_logits = Matrix(f.step_logits.rows, f.step_logits.cols);
        double total = 0.0;
        for (std::size_t r = 0; r < f.packed_row.size(); ++r) {
            const std::size_t p = f.packed_row[r];
            if (p == npos || batch.step_class[r] < 0) continue;
            std::span<double> grad;
            if (g) grad = g->d_step_logits.row(p);
            total += softmax_ce(f.step_logits.row(p), batch.step_class[r], inv_b, grad);
        }
        L.step = total * inv_b;
    }
    if (!f.path_logits.empty() && !batch.path_targets.empty()) {
        if (g) {
            g->d_path_logits.clear();
            for (const auto& m : f.path_logits) g->d_path_logits.emplace_back(m.rows, m.cols);
        }
        double total = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t l = 0; l < f.path_logits.size() && l < batch.path_targets[b].size(); ++l) {
                if (batch.path_targets[b][l] < 0) continue;
                std::span<double> grad;
                if (g) grad = g->d_path_logits[l].row(b);
                total += softmax_ce(f.path_logits[l].row(b), batch.path_targets[b][l], inv_b, grad);
            }
        }
        L.path = total * inv_b;
    }
    L.joint = L.step + L.path;
    return L;
}

// ------------------------------------------------------------ backward

ModelParams backward(const ModelParams& params, const ModelConfig& c, const Batch& batch, const ForwardState& f,
                     const LossGradients& dl) {
    ModelParams g = params.zeros_like();
    const std::size_t d = c.dim;
    const std::size_t B = batch.batch_size();
    Matrix dh1(f.h1.rows, d);

    if (params.step_head && !dl.d_step_logits.data.empty()) {
        dh1 = head_backward(*params.step_head, f.h1, f.step_hidden_pre, f.step_hidden, dl.d_step_logits, *g.step_head);
    }
    Matrix dpooled(B, d);
    for (std::size_t l = 0; l < params.path_heads.size() && l < dl.d_path_logits.size(); ++l) {
        const Matrix dx = head_backward(params.path_heads[l], f.pooled, f.path_hidden_pre[l], f.path_hidden[l],
                                        dl.d_path_logits[l], g.path_heads[l]);
        accumulate(dpooled, dx);
    }

    if (c.pooling == Pooling::mean) {
        for (std::size_t b = 0; b < B; ++b) {
            const auto [o, len] = f.segments[b];
            const double inv = 1.0 / static_cast<double>(len);
            for (std::size_t i = 0; i < len; ++i)
                for (std::size_t j = 0; j < d; ++j) dh1(o + i, j) += dpooled(b, j) * inv;
        }
    } else {
        Matrix dz_out(f.layer2->out.rows, d);
        for (std::size_t b = 0; b < B; ++b) {
            const auto src = dpooled.row(b);
            std::copy(src.begin(), src.end(), dz_out.row(f.segments2[b].offset).begin());
        }
        const Matrix dz = layer_backward(*params.layer2, c, *f.layer2, f.segments2, dz_out, *g.layer2);
        const std::size_t extra = params.cls ? 1 : 0;
        for (std::size_t b = 0; b < B; ++b) {
            const auto [o, len] = f.segments[b];
            const std::size_t off = f.segments2[b].offset;
            if (extra)
                for (std::size_t j = 0; j < d; ++j) g.cls->data[j] += dz(off, j);
            for (std::size_t i = 0; i < len; ++i)
                for (std::size_t j = 0; j < d; ++j) dh1(o + i, j) += dz(off + extra + i, j);
        }
    }

    const Matrix dx0 = layer_backward(params.layer1, c, *f.layer1, f.segments, dh1, g.layer1);
    if (params.mask && !batch.masked.empty()) {
        for (std::size_t r = 0; r < f.packed_row.size(); ++r) {
            if (f.packed_row[r] == npos || !batch.masked[r]) continue;
            for (std::size_t j = 0; j < d; ++j) g.mask->data[j] += dx0(f.packed_row[r], j) * input_scale(d);
        }
    }
    return g;
}

LossAndGrad pretrain_loss_and_grad(const ModelParams& params, const ModelConfig& c, const Batch& batch,
                                   const LossWeights& w, Rng* rng) {
    const auto f = forward(params, c, batch, rng);
    LossGradients dl;
    LossAndGrad out;
    out.losses = pretrain_losses(f, batch, w, &dl);
    out.grads = backward(params, c, batch, f, dl);
    return out;
}

// ------------------------------------------------------------ Adam

AdamState AdamState::for_params(const ModelParams& p) { return {p.zeros_like(), p.zeros_like(), 0}; }

void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const AdamConfig& cfg) {
    auto pb = params.blocks();
    const auto gb = grads.blocks();
    auto mb = state.m.blocks();
    auto vb = state.v.blocks();
    if (pb.size() != gb.size() || pb.size() != mb.size() || pb.size() != vb.size()) {
        throw ValidationError("adam_step: parameter, gradient and state structures differ");
    }
    for (std::size_t i = 0; i < pb.size(); ++i) {
        if (!pb[i].second->same_shape(*gb[i].second) || !pb[i].second->same_shape(*mb[i].second) ||
            !pb[i].second->same_shape(*vb[i].second)) {
            throw ValidationError("adam_step: shape mismatch in block " + pb[i].first);
        }
        for (double x : gb[i].second->data)
            if (!std::isfinite(x)) throw NumericError("adam_step: non-finite gradient in block " + gb[i].first);
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < pb.size(); ++i) {
        auto& p = pb[i].second->data;
        const auto& g = gb[i].second->data;
        auto& m = mb[i].second->data;
        auto& v = vb[i].second->data;
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = cfg.decoupled ? g[k] : g[k] + cfg.weight_decay * p[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            double update = mhat / (std::sqrt(vhat) + cfg.eps);
            if (cfg.decoupled) update += cfg.weight_decay * p[k];
            p[k] -= cfg.lr * update;
        }
    }
}

} // namespace pivot
