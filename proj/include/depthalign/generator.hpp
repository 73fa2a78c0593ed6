#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "depthalign/anchors.hpp"
#include "depthalign/basis.hpp"
#include "depthalign/field.hpp"

namespace depthalign {

// Architecture of the basis map generator: a fully convolutional trunk
// (3x3, stride 1, zero padding, ReLU) followed by 1x1 basis and gating
// heads. The trunk consumes the stacked input channels plus one validity
// channel.
struct GeneratorConfig {
    std::size_t feature_channels = 8; // C_F
    std::size_t hidden_channels = 32; // C_h
    std::size_t trunk_layers = 3;     // L
    std::size_t basis_count = 8;      // K
    bool ablate_features = false;     // zero F(x) while keeping capacity

    std::size_t input_channels() const { return feature_channels + 5; }
    std::size_t trunk_input_channels() const { return input_channels() + 1; }
};

bool same_shape(const GeneratorConfig& a, const GeneratorConfig& b);

// Trainable parameters. Conv kernels are stored as (9 * C_in) x C_out
// matrices whose row index is offset-major (k * C_in + c, k = 3*(dy+1)+dx+1).
struct GeneratorParams {
    GeneratorConfig config;
    std::vector<Eigen::MatrixXd> trunk_w;
    std::vector<Eigen::VectorXd> trunk_b;
    Eigen::MatrixXd basis_w; // C_h x (K-1)
    Eigen::VectorXd basis_b;
    Eigen::MatrixXd gate_w; // C_h x K
    Eigen::VectorXd gate_b;
};

// Trunk kernels from a zero-mean fan-in-scaled distribution; heads and all
// biases zero, so the untrained model is a pure global-scale corrector.
GeneratorParams init_params(const GeneratorConfig& cfg, std::uint64_t seed);

std::size_t param_count(const GeneratorConfig& cfg);
Eigen::VectorXd pack_params(const GeneratorParams& p);
void unpack_params(const Eigen::VectorXd& flat, GeneratorParams& p);

// Stacked generator input X(x) = [F, log Dmde, grad log Dmde (2), coords (2)]
// with invalid pixels zero-filled; the mask travels alongside as the
// validity channel.
struct GeneratorInput {
    FieldStack channels; // C_F + 5
    ValidityMask mask;
};

GeneratorInput build_input(const FieldStack& features, const DepthMap& d_mde);

struct ForwardResult {
    FieldStack primitive; // B, channel 0 identically 1
    FieldStack gating;    // G, per-pixel simplex
    EmbeddingStack embedding;
};

// Activation state retained for the backward pass.
struct ForwardCache {
    Eigen::MatrixXd input; // P x (C_F + 6)
    std::vector<Eigen::MatrixXd> pre;
    std::vector<Eigen::MatrixXd> post;
    Eigen::MatrixXd basis_raw; // P x (K-1)
    Eigen::MatrixXd g;         // P x K
    Eigen::MatrixXd b;         // P x K
    Eigen::MatrixXd e;         // P x K
    std::size_t height = 0;
    std::size_t width = 0;
};

ForwardResult forward(const GeneratorParams& p, const GeneratorInput& in,
                      ForwardCache* cache = nullptr);

// Individual training losses.
double loss_dense(const DepthMap& d_hat, const DepthMap& d_gt);
double loss_anchor(const DesignMatrix& m, const WeightVector& w,
                   const AnchorTargets& y);
double loss_decor(const EmbeddingStack& e, std::size_t* zero_norm_events = nullptr);
double loss_gate(const FieldStack& g);

struct LossWeights {
    double anchor = 0.1;
    double decor = 1e-4;
    double gate = 1e-4;
};

struct LossBreakdown {
    double dense = 0.0;
    double anchor = 0.0;
    double decor = 0.0;
    double gate = 0.0;
    double total = 0.0;
    double lambda_anchor = 0.0;
    double lambda_decor = 0.0;
    double lambda_gate = 0.0;
    std::size_t decor_zero_norm_events = 0;
};

// One scene as consumed by training: generator input plus the supervision
// signals, all precomputed.
struct TrainingScene {
    std::string id;
    GeneratorInput input;
    DepthMap d_mde;
    ScalarField log_mde;
    ScalarField log_gt;
    ValidityMask dense_mask; // valid in both depth maps
    AnchorSet anchors;
    AnchorTargets targets;
};

TrainingScene make_training_scene(std::string id, const FieldStack& features,
                                  const DepthMap& d_mde, const DepthMap& d_gt,
                                  AnchorSet anchors);

// Term multipliers for the combined objective; unit dense weight and the
// configured lambdas reproduce the training loss, while single-term
// selections drive the gradient checks.
struct TermMultipliers {
    double dense = 1.0;
    double anchor = 0.0;
    double decor = 0.0;
    double gate = 0.0;
};

TermMultipliers training_multipliers(const LossWeights& w);

// Forward state of the full per-scene objective (generator forward, ridge
// solve, dense prediction, losses).
struct SceneForward {
    ForwardCache cache;
    Eigen::MatrixXd design; // N x K
    Eigen::VectorXd targets;
    Eigen::VectorXd weights; // ridge solution
    Eigen::LLT<Eigen::MatrixXd> normal_llt;
    Eigen::VectorXd log_scale;   // P
    Eigen::VectorXd log_residual; // per pixel, zero outside the dense mask
    std::size_t dense_count = 0;
    LossBreakdown losses;
};

SceneForward scene_forward(const GeneratorParams& p, const TrainingScene& scene,
                           const TermMultipliers& mult, double ridge_lambda);

struct GeneratorGradient {
    std::vector<Eigen::MatrixXd> trunk_w;
    std::vector<Eigen::VectorXd> trunk_b;
    Eigen::MatrixXd basis_w;
    Eigen::VectorXd basis_b;
    Eigen::MatrixXd gate_w;
    Eigen::VectorXd gate_b;
};

Eigen::VectorXd pack_gradient(const GeneratorGradient& g);

// Exact analytic gradient of the combined objective with respect to every
// parameter. The ridge solution w*(E) is differentiated implicitly through
// its stationarity condition unless detach_solve is set.
GeneratorGradient backward(const GeneratorParams& p, const TrainingScene& scene,
                           const SceneForward& fwd, const TermMultipliers& mult,
                           bool detach_solve);

struct TrainConfig {
    GeneratorConfig arch;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t epochs = 25;
    std::uint64_t seed = 0;
    LossWeights weights;
    double ridge_lambda = 1e-3;
    bool detach_solve = false;
};

struct EpochLogRow {
    std::size_t epoch = 0;
    std::string split;
    double dense = 0.0, anchor = 0.0, decor = 0.0, gate = 0.0, total = 0.0;
};

struct TrainResult {
    GeneratorParams params; // checkpoint with the lowest validation total
    std::vector<EpochLogRow> log;
    std::size_t best_epoch = 0;
    double best_val_total = 0.0;
};

// Adam over per-scene steps; scene order reshuffles each epoch from the
// config seed. Fully deterministic given (seed, data order). Aborts on a
// non-finite loss, naming the epoch and scene.
TrainResult train(const std::vector<TrainingScene>& train_scenes,
                  const std::vector<TrainingScene>& val_scenes,
                  const TrainConfig& cfg);

// Continues training from existing parameters for `epochs` epochs;
// optimizer state starts fresh. Shape mismatch with cfg.arch is an error.
TrainResult fine_tune(const GeneratorParams& p,
                      const std::vector<TrainingScene>& train_scenes,
                      const std::vector<TrainingScene>& val_scenes,
                      std::size_t epochs, TrainConfig cfg);

// Model file: text manifest (architecture, block table) followed by one
// serialized tensor per parameter block.
void save_params(const std::filesystem::path& path, const GeneratorParams& p);
GeneratorParams load_params(const std::filesystem::path& path);

// Training log CSV: epoch,split,dense,anchor,decor,gate,total.
void write_train_log_csv(const std::filesystem::path& path,
                         const std::vector<EpochLogRow>& log,
                         const std::vector<std::string>& header_comments);

// Full inference path used by evaluation and diagnostics: forward, design
// assembly, ridge solve, dense log-scale, recovered depth.
struct BasisInference {
    ForwardResult fwd;
    DesignMatrix design;
    AnchorTargets targets;
    WeightVector weights;
    ScalarField log_scale;
    DepthMap depth;
};

BasisInference run_basis_inference(const GeneratorParams& p,
                                   const FieldStack& features,
                                   const DepthMap& d_mde, const AnchorSet& anchors,
                                   double ridge_lambda);

} // namespace depthalign
