#include "depthalign/generator.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "depthalign/errors.hpp"
#include "depthalign/rng.hpp"
#include "depthalign/tensor_io.hpp"

namespace depthalign {

namespace {

// Pixels are matrix rows (row-major over the image), channels are columns.
// This matches the channel-major FieldStack layout: plane c maps onto
// column c.

// patches(p, k*C + c) = in(neighbor_k(p), c), zero outside the image,
// with k = 3*(dy+1) + (dx+1).
Eigen::MatrixXd im2col3x3(const Eigen::MatrixXd& in, std::size_t h, std::size_t w) {
    const Eigen::Index cin = in.cols();
    Eigen::MatrixXd patches = Eigen::MatrixXd::Zero(in.rows(), 9 * cin);
    for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
            const Eigen::Index k = (dy + 1) * 3 + (dx + 1);
            const std::size_t r_lo = dy < 0 ? 1 : 0;
            const std::size_t r_hi = dy > 0 ? h - 1 : h;
            const std::size_t c_lo = dx < 0 ? 1 : 0;
            const std::size_t len = w - (dx != 0 ? 1 : 0);
            if (r_hi <= r_lo || len == 0) continue;
            for (std::size_t r = r_lo; r < r_hi; ++r) {
                const auto dst = static_cast<Eigen::Index>(r * w + c_lo);
                const auto src = static_cast<Eigen::Index>(
                    (static_cast<long>(r) + dy) * static_cast<long>(w) +
                    static_cast<long>(c_lo) + dx);
                patches.block(dst, k * cin, static_cast<Eigen::Index>(len), cin) =
                    in.block(src, 0, static_cast<Eigen::Index>(len), cin);
            }
        }
    }
    return patches;
}

// Adjoint of im2col3x3.
Eigen::MatrixXd col2im3x3(const Eigen::MatrixXd& dpatches, std::size_t h,
                          std::size_t w, Eigen::Index cin) {
    Eigen::MatrixXd din = Eigen::MatrixXd::Zero(dpatches.rows(), cin);
    for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
            const Eigen::Index k = (dy + 1) * 3 + (dx + 1);
            const std::size_t r_lo = dy < 0 ? 1 : 0;
            const std::size_t r_hi = dy > 0 ? h - 1 : h;
            const std::size_t c_lo = dx < 0 ? 1 : 0;
            const std::size_t len = w - (dx != 0 ? 1 : 0);
            if (r_hi <= r_lo || len == 0) continue;
            for (std::size_t r = r_lo; r < r_hi; ++r) {
                const auto p = static_cast<Eigen::Index>(r * w + c_lo);
                const auto q = static_cast<Eigen::Index>(
                    (static_cast<long>(r) + dy) * static_cast<long>(w) +
                    static_cast<long>(c_lo) + dx);
                din.block(q, 0, static_cast<Eigen::Index>(len), cin) +=
                    dpatches.block(p, k * cin, static_cast<Eigen::Index>(len), cin);
            }
        }
    }
    return din;
}

void softmax_rows(Eigen::MatrixXd& z) {
    for (Eigen::Index p = 0; p < z.rows(); ++p) {
        const double m = z.row(p).maxCoeff();
        z.row(p) = (z.row(p).array() - m).exp();
        z.row(p) /= z.row(p).sum();
    }
}

double smooth_l1(double r) {
    const double a = std::abs(r);
    return a < 1.0 ? 0.5 * r * r : a - 0.5;
}

double smooth_l1_grad(double r) {
    return std::abs(r) < 1.0 ? r : (r > 0.0 ? 1.0 : -1.0);
}

FieldStack matrix_to_stack(const Eigen::MatrixXd& m, std::size_t h, std::size_t w) {
    FieldStack s(static_cast<std::size_t>(m.cols()), h, w);
    for (Eigen::Index c = 0; c < m.cols(); ++c)
        std::memcpy(s.plane(static_cast<std::size_t>(c)), m.col(c).data(),
                    sizeof(double) * h * w);
    return s;
}

// Decorrelation term over the flattened embedding columns. Optionally also
// produces the gradient with respect to E (scaled by `mult`) into dE.
double decor_term(const Eigen::MatrixXd& e, std::size_t* zero_events,
                  Eigen::MatrixXd* de, double mult) {
    const Eigen::Index k = e.cols();
    if (k < 2) {
        if (zero_events) *zero_events = 0;
        return 0.0;
    }

    Eigen::VectorXd norms(k);
    std::size_t zeros = 0;
    for (Eigen::Index i = 0; i < k; ++i) {
        norms(i) = e.col(i).norm();
        if (norms(i) == 0.0) ++zeros;
    }
    if (zero_events) *zero_events = zeros;

    Eigen::MatrixXd en(e.rows(), k);
    for (Eigen::Index i = 0; i < k; ++i)
        en.col(i) = norms(i) > 0.0 ? (e.col(i) / norms(i)).eval()
                                   : Eigen::VectorXd::Zero(e.rows());

    Eigen::MatrixXd cos = en.transpose() * en;
    cos.diagonal().setZero(); // zero-norm columns already contribute nothing

    const double scale = 1.0 / static_cast<double>(k * (k - 1));
    const double value = scale * cos.squaredNorm();

    if (de) {
        // d/d e_i = (4 * scale / n_i) * sum_{j != i} c_ij (en_j - c_ij en_i)
        const Eigen::MatrixXd t = en * cos; // column i: sum_j c_ij en_j
        const Eigen::VectorXd q = cos.cwiseProduct(cos).rowwise().sum();
        for (Eigen::Index i = 0; i < k; ++i) {
            if (norms(i) == 0.0) continue;
            de->col(i) +=
                (mult * 4.0 * scale / norms(i)) * (t.col(i) - q(i) * en.col(i));
        }
    }
    return value;
}

double gate_term(const Eigen::MatrixXd& g, Eigen::MatrixXd* dg, double mult) {
    const double inv_p = 1.0 / static_cast<double>(g.rows());
    double acc = 0.0;
    for (Eigen::Index p = 0; p < g.rows(); ++p) {
        for (Eigen::Index m = 0; m < g.cols(); ++m) {
            const double v = g(p, m);
            if (v > 0.0) {
                acc += v * std::log(v);
                if (dg) (*dg)(p, m) += mult * inv_p * (std::log(v) + 1.0);
            }
        }
    }
    return acc * inv_p;
}

} // namespace

bool same_shape(const GeneratorConfig& a, const GeneratorConfig& b) {
    return a.feature_channels == b.feature_channels &&
           a.hidden_channels == b.hidden_channels &&
           a.trunk_layers == b.trunk_layers && a.basis_count == b.basis_count;
}

GeneratorParams init_params(const GeneratorConfig& cfg, std::uint64_t seed) {
    if (cfg.trunk_layers < 1 || cfg.hidden_channels < 1 || cfg.basis_count < 1)
        throw DomainError("init_params: trunk_layers, hidden_channels, basis_count must be >= 1");

    Rng rng(derive_seed(seed, "generator-init"));
    GeneratorParams p;
    p.config = cfg;

    const auto ch = static_cast<Eigen::Index>(cfg.hidden_channels);
    const auto k = static_cast<Eigen::Index>(cfg.basis_count);
    for (std::size_t l = 0; l < cfg.trunk_layers; ++l) {
        const auto cin = static_cast<Eigen::Index>(
            l == 0 ? cfg.trunk_input_channels() : cfg.hidden_channels);
        Eigen::MatrixXd w(9 * cin, ch);
        const double std_dev = std::sqrt(2.0 / static_cast<double>(9 * cin));
        for (Eigen::Index j = 0; j < w.cols(); ++j)
            for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = std_dev * rng.normal();
        p.trunk_w.push_back(std::move(w));
        p.trunk_b.push_back(Eigen::VectorXd::Zero(ch));
    }
    // The basis head gets a small random kernel: at exactly zero it is a
    // stationary point of every loss term (E_{m>0} = 0 forces w_{m>0} = 0,
    // and all of its gradient paths carry one of those factors), so the
    // learned basis maps could never activate. The gate head stays zero, so
    // gating starts uniform and the model is still close to a pure
    // global-scale corrector.
    p.basis_w.resize(ch, k - 1);
    const double head_std = 0.1 * std::sqrt(2.0 / static_cast<double>(cfg.hidden_channels));
    for (Eigen::Index j = 0; j < p.basis_w.cols(); ++j)
        for (Eigen::Index i = 0; i < p.basis_w.rows(); ++i)
            p.basis_w(i, j) = head_std * rng.normal();
    p.basis_b = Eigen::VectorXd::Zero(k - 1);
    p.gate_w = Eigen::MatrixXd::Zero(ch, k);
    p.gate_b = Eigen::VectorXd::Zero(k);
    return p;
}

std::size_t param_count(const GeneratorConfig& cfg) {
    std::size_t n = 0;
    for (std::size_t l = 0; l < cfg.trunk_layers; ++l) {
        const std::size_t cin =
            l == 0 ? cfg.trunk_input_channels() : cfg.hidden_channels;
        n += 9 * cin * cfg.hidden_channels + cfg.hidden_channels;
    }
    n += cfg.hidden_channels * (cfg.basis_count - 1) + (cfg.basis_count - 1);
    n += cfg.hidden_channels * cfg.basis_count + cfg.basis_count;
    return n;
}

namespace {

template <class MatrixLike>
void copy_block_out(Eigen::VectorXd& flat, Eigen::Index& pos, const MatrixLike& m) {
    std::memcpy(flat.data() + pos, m.data(), sizeof(double) * m.size());
    pos += static_cast<Eigen::Index>(m.size());
}

template <class MatrixLike>
void copy_block_in(const Eigen::VectorXd& flat, Eigen::Index& pos, MatrixLike& m) {
    std::memcpy(m.data(), flat.data() + pos, sizeof(double) * m.size());
    pos += static_cast<Eigen::Index>(m.size());
}

} // namespace

Eigen::VectorXd pack_params(const GeneratorParams& p) {
    Eigen::VectorXd flat(static_cast<Eigen::Index>(param_count(p.config)));
    Eigen::Index pos = 0;
    for (std::size_t l = 0; l < p.trunk_w.size(); ++l) {
        copy_block_out(flat, pos, p.trunk_w[l]);
        copy_block_out(flat, pos, p.trunk_b[l]);
    }
    copy_block_out(flat, pos, p.basis_w);
    copy_block_out(flat, pos, p.basis_b);
    copy_block_out(flat, pos, p.gate_w);
    copy_block_out(flat, pos, p.gate_b);
    return flat;
}

void unpack_params(const Eigen::VectorXd& flat, GeneratorParams& p) {
    if (flat.size() != static_cast<Eigen::Index>(param_count(p.config)))
        throw DimensionError("unpack_params: flat size does not match the architecture");
    Eigen::Index pos = 0;
    for (std::size_t l = 0; l < p.trunk_w.size(); ++l) {
        copy_block_in(flat, pos, p.trunk_w[l]);
        copy_block_in(flat, pos, p.trunk_b[l]);
    }
    copy_block_in(flat, pos, p.basis_w);
    copy_block_in(flat, pos, p.basis_b);
    copy_block_in(flat, pos, p.gate_w);
    copy_block_in(flat, pos, p.gate_b);
}

Eigen::VectorXd pack_gradient(const GeneratorGradient& g) {
    Eigen::Index n = 0;
    for (std::size_t l = 0; l < g.trunk_w.size(); ++l)
        n += g.trunk_w[l].size() + g.trunk_b[l].size();
    n += g.basis_w.size() + g.basis_b.size() + g.gate_w.size() + g.gate_b.size();

    Eigen::VectorXd flat(n);
    Eigen::Index pos = 0;
    for (std::size_t l = 0; l < g.trunk_w.size(); ++l) {
        copy_block_out(flat, pos, g.trunk_w[l]);
        copy_block_out(flat, pos, g.trunk_b[l]);
    }
    copy_block_out(flat, pos, g.basis_w);
    copy_block_out(flat, pos, g.basis_b);
    copy_block_out(flat, pos, g.gate_w);
    copy_block_out(flat, pos, g.gate_b);
    return flat;
}

GeneratorInput build_input(const FieldStack& features, const DepthMap& d_mde) {
    const std::size_t h = d_mde.height(), w = d_mde.width();
    if (features.channels > 0 && (features.height != h || features.width != w))
        throw DimensionError("build_input: feature stack dimension mismatch");

    const std::size_t cf = features.channels;
    GeneratorInput in;
    in.mask = d_mde.mask;
    in.channels = FieldStack(cf + 5, h, w, 0.0);

    for (std::size_t c = 0; c < cf; ++c) {
        double* dst = in.channels.plane(c);
        const double* src = features.plane(c);
        for (std::size_t i = 0; i < h * w; ++i) dst[i] = d_mde.mask.data[i] ? src[i] : 0.0;
    }

    const ScalarField log_mde = log_field(d_mde);
    double* log_plane = in.channels.plane(cf);
    for (std::size_t i = 0; i < h * w; ++i)
        log_plane[i] = d_mde.mask.data[i] ? log_mde.data[i] : 0.0;

    const FieldStack grad = spatial_gradient(log_mde, d_mde.mask);
    std::memcpy(in.channels.plane(cf + 1), grad.plane(0), sizeof(double) * h * w);
    std::memcpy(in.channels.plane(cf + 2), grad.plane(1), sizeof(double) * h * w);

    // Coordinates normalized to [-1, 1]; a degenerate axis maps to -1.
    double* rows_plane = in.channels.plane(cf + 3);
    double* cols_plane = in.channels.plane(cf + 4);
    for (std::size_t r = 0; r < h; ++r) {
        const double rn = h > 1 ? 2.0 * static_cast<double>(r) / static_cast<double>(h - 1) - 1.0
                                : -1.0;
        for (std::size_t c = 0; c < w; ++c) {
            if (!d_mde.mask.at(r, c)) continue;
            const double cn = w > 1
                                   ? 2.0 * static_cast<double>(c) / static_cast<double>(w - 1) - 1.0
                                   : -1.0;
            rows_plane[r * w + c] = rn;
            cols_plane[r * w + c] = cn;
        }
    }
    return in;
}

ForwardResult forward(const GeneratorParams& p, const GeneratorInput& in,
                      ForwardCache* cache) {
    const GeneratorConfig& cfg = p.config;
    if (in.channels.channels != cfg.input_channels())
        throw DimensionError("forward: input has " + std::to_string(in.channels.channels) +
                             " channels, configuration expects " +
                             std::to_string(cfg.input_channels()));
    if (in.mask.height != in.channels.height || in.mask.width != in.channels.width)
        throw DimensionError("forward: input mask dimension mismatch");

    const std::size_t h = in.channels.height, w = in.channels.width;
    const auto np = static_cast<Eigen::Index>(h * w);
    const auto cin = static_cast<Eigen::Index>(cfg.trunk_input_channels());

    Eigen::MatrixXd x(np, cin);
    for (std::size_t c = 0; c < cfg.input_channels(); ++c)
        x.col(static_cast<Eigen::Index>(c)) =
            Eigen::Map<const Eigen::VectorXd>(in.channels.plane(c), np);
    for (Eigen::Index i = 0; i < np; ++i)
        x(i, cin - 1) = in.mask.data[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    if (cfg.ablate_features && cfg.feature_channels > 0)
        x.leftCols(static_cast<Eigen::Index>(cfg.feature_channels)).setZero();

    ForwardCache local;
    ForwardCache& cc = cache ? *cache : local;
    cc.input = std::move(x);
    cc.height = h;
    cc.width = w;
    cc.pre.clear();
    cc.post.clear();

    const Eigen::MatrixXd* act = &cc.input;
    for (std::size_t l = 0; l < cfg.trunk_layers; ++l) {
        Eigen::MatrixXd patches = im2col3x3(*act, h, w);
        Eigen::MatrixXd pre = patches * p.trunk_w[l];
        pre.rowwise() += p.trunk_b[l].transpose();
        cc.pre.push_back(std::move(pre));
        cc.post.push_back(cc.pre.back().cwiseMax(0.0));
        act = &cc.post.back();
    }

    const Eigen::MatrixXd& hidden = *act;
    const auto k = static_cast<Eigen::Index>(cfg.basis_count);

    cc.basis_raw = hidden * p.basis_w;
    cc.basis_raw.rowwise() += p.basis_b.transpose();

    cc.b.resize(np, k);
    cc.b.col(0).setOnes();
    if (k > 1) cc.b.rightCols(k - 1) = cc.basis_raw;

    Eigen::MatrixXd logits = hidden * p.gate_w;
    logits.rowwise() += p.gate_b.transpose();
    softmax_rows(logits);
    cc.g = std::move(logits);

    cc.e = cc.g.cwiseProduct(cc.b);

    ForwardResult out;
    out.primitive = matrix_to_stack(cc.b, h, w);
    out.gating = matrix_to_stack(cc.g, h, w);
    out.embedding = matrix_to_stack(cc.e, h, w);
    return out;
}

double loss_dense(const DepthMap& d_hat, const DepthMap& d_gt) {
    if (d_hat.height() != d_gt.height() || d_hat.width() != d_gt.width())
        throw DimensionError("loss_dense: depth map dimension mismatch");
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < d_hat.values.data.size(); ++i) {
        if (!d_hat.mask.data[i] || !d_gt.mask.data[i]) continue;
        acc += smooth_l1(std::log(d_hat.values.data[i]) - std::log(d_gt.values.data[i]));
        ++n;
    }
    if (n == 0)
        throw EmptyReductionError("loss_dense: no jointly valid pixels");
    return acc / static_cast<double>(n);
}

double loss_anchor(const DesignMatrix& m, const WeightVector& w,
                   const AnchorTargets& y) {
    if (m.m.cols() != w.w.size() ||
        m.m.rows() != static_cast<Eigen::Index>(y.y.size()))
        throw DimensionError("loss_anchor: shape mismatch");
    const Eigen::Map<const Eigen::VectorXd> yv(y.y.data(),
                                               static_cast<Eigen::Index>(y.y.size()));
    return (m.m * w.w - yv).squaredNorm() / static_cast<double>(m.m.rows());
}

double loss_decor(const EmbeddingStack& e, std::size_t* zero_norm_events) {
    if (e.channels < 2)
        throw DimensionError("loss_decor: at least two channels required");
    const auto np = static_cast<Eigen::Index>(e.plane_size());
    Eigen::MatrixXd em(np, static_cast<Eigen::Index>(e.channels));
    for (std::size_t c = 0; c < e.channels; ++c)
        em.col(static_cast<Eigen::Index>(c)) =
            Eigen::Map<const Eigen::VectorXd>(e.plane(c), np);
    return decor_term(em, zero_norm_events, nullptr, 0.0);
}

double loss_gate(const FieldStack& g) {
    const auto np = static_cast<Eigen::Index>(g.plane_size());
    Eigen::MatrixXd gm(np, static_cast<Eigen::Index>(g.channels));
    for (std::size_t c = 0; c < g.channels; ++c)
        gm.col(static_cast<Eigen::Index>(c)) =
            Eigen::Map<const Eigen::VectorXd>(g.plane(c), np);
    return gate_term(gm, nullptr, 0.0);
}

TrainingScene make_training_scene(std::string id, const FieldStack& features,
                                  const DepthMap& d_mde, const DepthMap& d_gt,
                                  AnchorSet anchors) {
    if (d_gt.height() != d_mde.height() || d_gt.width() != d_mde.width())
        throw DimensionError("make_training_scene: depth map dimension mismatch");

    TrainingScene s;
    s.id = std::move(id);
    s.input = build_input(features, d_mde);
    s.d_mde = d_mde;
    s.log_mde = log_field(d_mde);
    s.log_gt = log_field(d_gt);
    s.dense_mask = ValidityMask(d_gt.height(), d_gt.width(), false);
    for (std::size_t i = 0; i < s.dense_mask.data.size(); ++i)
        s.dense_mask.data[i] = d_gt.mask.data[i] && d_mde.mask.data[i];
    s.targets = compute_targets(anchors, d_mde);
    s.anchors = std::move(anchors);
    return s;
}

TermMultipliers training_multipliers(const LossWeights& w) {
    return TermMultipliers{1.0, w.anchor, w.decor, w.gate};
}

SceneForward scene_forward(const GeneratorParams& p, const TrainingScene& scene,
                           const TermMultipliers& mult, double ridge_lambda) {
    SceneForward sf;
    forward(p, scene.input, &sf.cache);

    const std::size_t h = sf.cache.height, w = sf.cache.width;
    const auto np = static_cast<Eigen::Index>(h * w);
    const auto n = static_cast<Eigen::Index>(scene.anchors.size());
    const auto k = static_cast<Eigen::Index>(p.config.basis_count);
    if (n < 1)
        throw InsufficiencyError("scene_forward: scene has no anchors");

    sf.design.resize(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Anchor& an = scene.anchors.anchors[static_cast<std::size_t>(i)];
        sf.design.row(i) = sf.cache.e.row(static_cast<Eigen::Index>(an.row * w + an.col));
    }
    sf.targets = Eigen::Map<const Eigen::VectorXd>(scene.targets.y.data(), n);

    Eigen::MatrixXd normal = sf.design.transpose() * sf.design;
    normal.diagonal().array() += ridge_lambda;
    sf.normal_llt.compute(normal);
    if (sf.normal_llt.info() != Eigen::Success)
        throw RankError("scene_forward: singular ridge system; use ridge_lambda > 0");
    const Eigen::VectorXd rhs = sf.design.transpose() * sf.targets;
    sf.weights = sf.normal_llt.solve(rhs);
    sf.weights += sf.normal_llt.solve(rhs - normal * sf.weights);

    sf.log_scale = sf.cache.e * sf.weights;

    // Dense loss in log space over the jointly valid pixels.
    sf.log_residual = Eigen::VectorXd::Zero(np);
    sf.dense_count = 0;
    double dense_acc = 0.0;
    for (Eigen::Index i = 0; i < np; ++i) {
        if (!scene.dense_mask.data[static_cast<std::size_t>(i)]) continue;
        const double r = scene.log_mde.data[static_cast<std::size_t>(i)] + sf.log_scale(i) -
                         scene.log_gt.data[static_cast<std::size_t>(i)];
        sf.log_residual(i) = r;
        dense_acc += smooth_l1(r);
        ++sf.dense_count;
    }
    if (sf.dense_count == 0)
        throw EmptyReductionError("scene_forward: scene has no jointly valid pixels");

    LossBreakdown& l = sf.losses;
    l.dense = dense_acc / static_cast<double>(sf.dense_count);
    l.anchor = (sf.design * sf.weights - sf.targets).squaredNorm() /
               static_cast<double>(n);
    l.decor = k >= 2 ? decor_term(sf.cache.e, &l.decor_zero_norm_events, nullptr, 0.0)
                     : 0.0;
    l.gate = gate_term(sf.cache.g, nullptr, 0.0);
    l.lambda_anchor = mult.anchor;
    l.lambda_decor = mult.decor;
    l.lambda_gate = mult.gate;
    l.total = mult.dense * l.dense + mult.anchor * l.anchor + mult.decor * l.decor +
              mult.gate * l.gate;
    return sf;
}

GeneratorGradient backward(const GeneratorParams& p, const TrainingScene& scene,
                           const SceneForward& sf, const TermMultipliers& mult,
                           bool detach_solve) {
    const GeneratorConfig& cfg = p.config;
    const std::size_t h = sf.cache.height, w = sf.cache.width;
    const auto np = static_cast<Eigen::Index>(h * w);
    const auto n = static_cast<Eigen::Index>(scene.anchors.size());
    const auto k = static_cast<Eigen::Index>(cfg.basis_count);

    // d(total)/d(log-scale) from the dense term.
    Eigen::VectorXd g_ell = Eigen::VectorXd::Zero(np);
    if (mult.dense != 0.0) {
        const double inv = mult.dense / static_cast<double>(sf.dense_count);
        for (Eigen::Index i = 0; i < np; ++i)
            if (scene.dense_mask.data[static_cast<std::size_t>(i)])
                g_ell(i) = inv * smooth_l1_grad(sf.log_residual(i));
    }

    Eigen::MatrixXd de = Eigen::MatrixXd::Zero(np, k);

    // Dense term, direct path through ell = E w.
    if (mult.dense != 0.0) de.noalias() += g_ell * sf.weights.transpose();

    // Anchor residual r_bar = d(anchor)/d(Mw).
    Eigen::VectorXd r_bar = (2.0 / static_cast<double>(n)) *
                            (sf.design * sf.weights - sf.targets);

    // Upstream gradient on w from both losses.
    Eigen::VectorXd g_w = Eigen::VectorXd::Zero(k);
    if (mult.dense != 0.0) g_w.noalias() += sf.cache.e.transpose() * g_ell;
    if (mult.anchor != 0.0) g_w.noalias() += mult.anchor * (sf.design.transpose() * r_bar);

    // Design-matrix gradient: the anchor loss's direct dependence plus the
    // implicit path through the ridge solution.
    Eigen::MatrixXd dm = Eigen::MatrixXd::Zero(n, k);
    if (mult.anchor != 0.0) dm.noalias() += mult.anchor * (r_bar * sf.weights.transpose());
    if (!detach_solve && g_w.squaredNorm() > 0.0) {
        const Eigen::VectorXd z = sf.normal_llt.solve(g_w);
        dm.noalias() += (sf.targets - sf.design * sf.weights) * z.transpose();
        dm.noalias() -= (sf.design * z) * sf.weights.transpose();
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        const Anchor& an = scene.anchors.anchors[static_cast<std::size_t>(i)];
        de.row(static_cast<Eigen::Index>(an.row * w + an.col)) += dm.row(i);
    }

    if (mult.decor != 0.0 && k >= 2)
        decor_term(sf.cache.e, nullptr, &de, mult.decor);

    // E = G .* B.
    Eigen::MatrixXd dg = de.cwiseProduct(sf.cache.b);
    Eigen::MatrixXd db = de.cwiseProduct(sf.cache.g);
    if (mult.gate != 0.0) gate_term(sf.cache.g, &dg, mult.gate);

    // Softmax backward.
    Eigen::VectorXd dot = (dg.cwiseProduct(sf.cache.g)).rowwise().sum();
    Eigen::MatrixXd dlogits =
        sf.cache.g.cwiseProduct(dg - dot.replicate(1, k));

    GeneratorGradient grad;
    const Eigen::MatrixXd& hidden =
        cfg.trunk_layers > 0 ? sf.cache.post.back() : sf.cache.input;

    // Heads. B's constant channel absorbs no gradient.
    if (k > 1) {
        const Eigen::MatrixXd dbraw = db.rightCols(k - 1);
        grad.basis_w = hidden.transpose() * dbraw;
        grad.basis_b = dbraw.colwise().sum().transpose();
    } else {
        grad.basis_w = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cfg.hidden_channels), 0);
        grad.basis_b = Eigen::VectorXd::Zero(0);
    }
    grad.gate_w = hidden.transpose() * dlogits;
    grad.gate_b = dlogits.colwise().sum().transpose();

    Eigen::MatrixXd dhidden = dlogits * p.gate_w.transpose();
    if (k > 1) dhidden.noalias() += db.rightCols(k - 1) * p.basis_w.transpose();

    // Trunk backward, recomputing the im2col patches layer by layer.
    grad.trunk_w.resize(cfg.trunk_layers);
    grad.trunk_b.resize(cfg.trunk_layers);
    Eigen::MatrixXd dact = std::move(dhidden);
    for (std::size_t l = cfg.trunk_layers; l-- > 0;) {
        const Eigen::MatrixXd dz =
            dact.cwiseProduct((sf.cache.pre[l].array() > 0.0).cast<double>().matrix());
        const Eigen::MatrixXd& below = l == 0 ? sf.cache.input : sf.cache.post[l - 1];
        const Eigen::MatrixXd patches = im2col3x3(below, h, w);
        grad.trunk_w[l] = patches.transpose() * dz;
        grad.trunk_b[l] = dz.colwise().sum().transpose();
        if (l > 0) {
            const Eigen::MatrixXd dpatches = dz * p.trunk_w[l].transpose();
            dact = col2im3x3(dpatches, h, w, below.cols());
        }
    }
    return grad;
}

namespace {

LossBreakdown mean_losses(const GeneratorParams& params,
                          const std::vector<TrainingScene>& scenes,
                          const TermMultipliers& mult, double ridge_lambda) {
    LossBreakdown acc;
    acc.lambda_anchor = mult.anchor;
    acc.lambda_decor = mult.decor;
    acc.lambda_gate = mult.gate;
    for (const auto& scene : scenes) {
        const SceneForward sf = scene_forward(params, scene, mult, ridge_lambda);
        acc.dense += sf.losses.dense;
        acc.anchor += sf.losses.anchor;
        acc.decor += sf.losses.decor;
        acc.gate += sf.losses.gate;
        acc.total += sf.losses.total;
        acc.decor_zero_norm_events += sf.losses.decor_zero_norm_events;
    }
    const double inv = scenes.empty() ? 0.0 : 1.0 / static_cast<double>(scenes.size());
    acc.dense *= inv;
    acc.anchor *= inv;
    acc.decor *= inv;
    acc.gate *= inv;
    acc.total *= inv;
    return acc;
}

TrainResult train_loop(GeneratorParams params,
                       const std::vector<TrainingScene>& train_scenes,
                       const std::vector<TrainingScene>& val_scenes,
                       const TrainConfig& cfg, std::size_t epochs) {
    if (train_scenes.empty())
        throw InsufficiencyError("train: at least one training scene required");

    const TermMultipliers mult = training_multipliers(cfg.weights);

    Eigen::VectorXd flat = pack_params(params);
    Eigen::VectorXd m = Eigen::VectorXd::Zero(flat.size());
    Eigen::VectorXd v = Eigen::VectorXd::Zero(flat.size());
    double beta1_t = 1.0, beta2_t = 1.0;

    TrainResult result;
    result.params = params;
    result.best_val_total = std::numeric_limits<double>::infinity();
    result.best_epoch = 0;

    std::vector<std::size_t> order(train_scenes.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, "epoch-" + std::to_string(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.bounded(i)]);

        LossBreakdown train_acc;
        for (const std::size_t idx : order) {
            const TrainingScene& scene = train_scenes[idx];
            const SceneForward sf = scene_forward(params, scene, mult, cfg.ridge_lambda);
            if (!std::isfinite(sf.losses.total))
                throw Error("train: non-finite loss at epoch " + std::to_string(epoch) +
                            ", scene " + scene.id);

            const GeneratorGradient grad =
                backward(params, scene, sf, mult, cfg.detach_solve);
            const Eigen::VectorXd g = pack_gradient(grad);

            beta1_t *= cfg.beta1;
            beta2_t *= cfg.beta2;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
            const Eigen::VectorXd m_hat = m / (1.0 - beta1_t);
            const Eigen::VectorXd v_hat = v / (1.0 - beta2_t);
            flat.array() -= cfg.learning_rate * m_hat.array() /
                            (v_hat.array().sqrt() + cfg.adam_eps);
            unpack_params(flat, params);

            train_acc.dense += sf.losses.dense;
            train_acc.anchor += sf.losses.anchor;
            train_acc.decor += sf.losses.decor;
            train_acc.gate += sf.losses.gate;
            train_acc.total += sf.losses.total;
        }
        const double inv = 1.0 / static_cast<double>(train_scenes.size());
        result.log.push_back(EpochLogRow{epoch, "train", train_acc.dense * inv,
                                         train_acc.anchor * inv, train_acc.decor * inv,
                                         train_acc.gate * inv, train_acc.total * inv});

        if (!val_scenes.empty()) {
            const LossBreakdown val = mean_losses(params, val_scenes, mult, cfg.ridge_lambda);
            if (!std::isfinite(val.total))
                throw Error("train: non-finite validation loss at epoch " +
                            std::to_string(epoch));
            result.log.push_back(EpochLogRow{epoch, "val", val.dense, val.anchor,
                                             val.decor, val.gate, val.total});
            if (val.total < result.best_val_total) {
                result.best_val_total = val.total;
                result.best_epoch = epoch;
                result.params = params;
            }
        } else {
            // Without a validation split the final parameters win.
            result.params = params;
            result.best_epoch = epoch;
        }
    }
    return result;
}

} // namespace

TrainResult train(const std::vector<TrainingScene>& train_scenes,
                  const std::vector<TrainingScene>& val_scenes,
                  const TrainConfig& cfg) {
    GeneratorParams params = init_params(cfg.arch, cfg.seed);
    return train_loop(std::move(params), train_scenes, val_scenes, cfg, cfg.epochs);
}

TrainResult fine_tune(const GeneratorParams& p,
                      const std::vector<TrainingScene>& train_scenes,
                      const std::vector<TrainingScene>& val_scenes,
                      std::size_t epochs, TrainConfig cfg) {
    if (!same_shape(p.config, cfg.arch))
        throw DimensionError("fine_tune: parameter shapes do not match the configured "
                             "(C_F, C_h, L, K)");
    cfg.arch = p.config;
    if (epochs == 0) {
        TrainResult r;
        r.params = p;
        r.best_epoch = 0;
        r.best_val_total = val_scenes.empty()
                               ? 0.0
                               : mean_losses(p, val_scenes, training_multipliers(cfg.weights),
                                             cfg.ridge_lambda)
                                     .total;
        return r;
    }
    return train_loop(p, train_scenes, val_scenes, cfg, epochs);
}

namespace {

struct BlockRef {
    std::string name;
    const double* data;
    std::size_t len;
};

std::vector<BlockRef> param_blocks(const GeneratorParams& p) {
    std::vector<BlockRef> blocks;
    for (std::size_t l = 0; l < p.trunk_w.size(); ++l) {
        blocks.push_back({"trunk" + std::to_string(l) + ".w", p.trunk_w[l].data(),
                          static_cast<std::size_t>(p.trunk_w[l].size())});
        blocks.push_back({"trunk" + std::to_string(l) + ".b", p.trunk_b[l].data(),
                          static_cast<std::size_t>(p.trunk_b[l].size())});
    }
    blocks.push_back({"basis.w", p.basis_w.data(), static_cast<std::size_t>(p.basis_w.size())});
    blocks.push_back({"basis.b", p.basis_b.data(), static_cast<std::size_t>(p.basis_b.size())});
    blocks.push_back({"gate.w", p.gate_w.data(), static_cast<std::size_t>(p.gate_w.size())});
    blocks.push_back({"gate.b", p.gate_b.data(), static_cast<std::size_t>(p.gate_b.size())});
    return blocks;
}

} // namespace

void save_params(const std::filesystem::path& path, const GeneratorParams& p) {
    const auto blocks = param_blocks(p);

    // Vectors serialize as (len, 1) tensors; zero-length blocks (K = 1 has
    // an empty basis head) are listed with offset -1 and carry no payload.
    std::vector<std::vector<std::uint8_t>> encoded;
    std::vector<long> offsets;
    long pos = 0;
    for (const auto& blk : blocks) {
        if (blk.len == 0) {
            encoded.emplace_back();
            offsets.push_back(-1);
            continue;
        }
        Tensor t;
        t.dtype = TensorDtype::Float64;
        t.dims = {static_cast<std::uint32_t>(blk.len), 1};
        t.data.assign(blk.data, blk.data + blk.len);
        encoded.push_back(encode_tensor(t));
        offsets.push_back(pos);
        pos += static_cast<long>(encoded.back().size());
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_params: cannot open " + path.string());
    out << "DAPM 1\n";
    out << "feature_channels " << p.config.feature_channels << '\n';
    out << "hidden_channels " << p.config.hidden_channels << '\n';
    out << "trunk_layers " << p.config.trunk_layers << '\n';
    out << "basis_count " << p.config.basis_count << '\n';
    out << "ablate_features " << (p.config.ablate_features ? 1 : 0) << '\n';
    out << "blocks " << blocks.size() << '\n';
    for (std::size_t i = 0; i < blocks.size(); ++i)
        out << "block " << blocks[i].name << ' ' << blocks[i].len << ' ' << offsets[i]
            << '\n';
    out << "end\n";
    for (const auto& bytes : encoded)
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("save_params: short write to " + path.string());
}

GeneratorParams load_params(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_params: cannot open " + path.string());
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    const std::string end_marker = "end\n";
    std::size_t header_end = std::string::npos;
    if (all.rfind("DAPM 1\n", 0) != 0)
        throw FormatError("load_params: missing DAPM header", 0);
    for (std::size_t pos = 0; pos < all.size();) {
        const std::size_t nl = all.find('\n', pos);
        if (nl == std::string::npos) break;
        if (all.compare(pos, nl - pos, "end") == 0) {
            header_end = nl + 1;
            break;
        }
        pos = nl + 1;
    }
    if (header_end == std::string::npos)
        throw FormatError("load_params: missing end-of-manifest marker", all.size());

    std::istringstream header(all.substr(0, header_end));
    std::string line;
    std::getline(header, line); // DAPM 1

    GeneratorConfig cfg;
    std::size_t block_count = 0;
    struct ManifestBlock {
        std::string name;
        std::size_t len;
        long offset;
    };
    std::vector<ManifestBlock> manifest;
    while (std::getline(header, line)) {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "feature_channels") ls >> cfg.feature_channels;
        else if (key == "hidden_channels") ls >> cfg.hidden_channels;
        else if (key == "trunk_layers") ls >> cfg.trunk_layers;
        else if (key == "basis_count") ls >> cfg.basis_count;
        else if (key == "ablate_features") {
            int flag = 0;
            ls >> flag;
            cfg.ablate_features = flag != 0;
        } else if (key == "blocks") ls >> block_count;
        else if (key == "block") {
            ManifestBlock b;
            ls >> b.name >> b.len >> b.offset;
            manifest.push_back(b);
        } else if (key == "end") break;
        else throw FormatError("load_params: unknown manifest key \"" + key + "\"", 0);
    }
    if (manifest.size() != block_count)
        throw FormatError("load_params: manifest block count mismatch", 0);

    GeneratorParams p = init_params(cfg, 0);

    auto load_block = [&](const std::string& name, double* dst, std::size_t len) {
        for (const auto& b : manifest) {
            if (b.name != name) continue;
            if (b.len != len)
                throw DimensionError("load_params: block " + name + " has length " +
                                     std::to_string(b.len) + ", expected " +
                                     std::to_string(len));
            if (len == 0) return;
            const std::size_t start = header_end + static_cast<std::size_t>(b.offset);
            const std::size_t bytes = 20 + 8 * len; // rank-2 float64 tensor
            if (b.offset < 0 || start + bytes > all.size())
                throw FormatError("load_params: block " + name + " out of bounds",
                                  all.size());
            std::vector<std::uint8_t> buf(all.begin() + static_cast<std::ptrdiff_t>(start),
                                          all.begin() + static_cast<std::ptrdiff_t>(start + bytes));
            const Tensor t = decode_tensor(buf);
            if (t.data.size() != len)
                throw DimensionError("load_params: decoded block " + name + " length mismatch");
            std::copy(t.data.begin(), t.data.end(), dst);
            return;
        }
        throw FormatError("load_params: missing block " + name, 0);
    };

    for (std::size_t l = 0; l < cfg.trunk_layers; ++l) {
        load_block("trunk" + std::to_string(l) + ".w", p.trunk_w[l].data(),
                   static_cast<std::size_t>(p.trunk_w[l].size()));
        load_block("trunk" + std::to_string(l) + ".b", p.trunk_b[l].data(),
                   static_cast<std::size_t>(p.trunk_b[l].size()));
    }
    load_block("basis.w", p.basis_w.data(), static_cast<std::size_t>(p.basis_w.size()));
    load_block("basis.b", p.basis_b.data(), static_cast<std::size_t>(p.basis_b.size()));
    load_block("gate.w", p.gate_w.data(), static_cast<std::size_t>(p.gate_w.size()));
    load_block("gate.b", p.gate_b.data(), static_cast<std::size_t>(p.gate_b.size()));
    return p;
}

void write_train_log_csv(const std::filesystem::path& path,
                         const std::vector<EpochLogRow>& log,
                         const std::vector<std::string>& header_comments) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_train_log_csv: cannot open " + path.string());
    for (const auto& line : header_comments) out << "# " << line << '\n';
    out << "epoch,split,dense,anchor,decor,gate,total\n";
    char buf[512];
    for (const auto& row : log) {
        std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      row.epoch, row.split.c_str(), row.dense, row.anchor, row.decor,
                      row.gate, row.total);
        out << buf;
    }
}

BasisInference run_basis_inference(const GeneratorParams& p,
                                   const FieldStack& features,
                                   const DepthMap& d_mde, const AnchorSet& anchors,
                                   double ridge_lambda) {
    BasisInference out;
    const GeneratorInput input = build_input(features, d_mde);
    out.fwd = forward(p, input);
    out.design = assemble_design(out.fwd.embedding, anchors);
    out.targets = compute_targets(anchors, d_mde);
    out.weights = ridge_solve(out.design, out.targets, RidgeConfig{ridge_lambda});
    out.log_scale = predict_log_scale(out.fwd.embedding, out.weights);
    out.depth = recover_depth(d_mde, out.log_scale);
    return out;
}

} // namespace depthalign
