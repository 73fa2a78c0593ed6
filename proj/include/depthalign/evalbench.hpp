#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "depthalign/anchors.hpp"
#include "depthalign/baselines.hpp"
#include "depthalign/field.hpp"
#include "depthalign/generator.hpp"
#include "depthalign/synth.hpp"

namespace depthalign {

// Mean |pred - gt| / gt over the jointly valid pixels of `mask` and both
// depth maps. Pixels the method invalidated are excluded (counted
// separately by compute_metrics).
double abs_rel(const DepthMap& pred, const DepthMap& gt, const ValidityMask& mask);

// Fraction of jointly valid pixels with max(pred/gt, gt/pred) < 1.25.
double delta1(const DepthMap& pred, const DepthMap& gt, const ValidityMask& mask);

struct MetricPair {
    double abs_rel = 0.0;
    double delta1 = 0.0;
    double invalid_fraction = 0.0; // method-invalidated share of the eval mask
};

MetricPair compute_metrics(const DepthMap& pred, const DepthMap& gt,
                           const ValidityMask& mask);

struct EvalRecord {
    std::string scene_id;
    std::string method;
    std::string regime;
    std::size_t n_anchors = 0;
    double abs_rel = 0.0;
    double delta1 = 0.0;
    double invalid_fraction = 0.0;
    std::uint64_t anchor_hash = 0; // asserts paired-anchor discipline
};

// Method dispatch configuration. `model` must be set for the basis method;
// the region method requires the scene to carry a label map.
struct MethodConfig {
    std::string name; // global | piecewise | lwlr | grid | region | basis
    std::size_t piecewise_bins_max = 4;
    LwlrConfig lwlr;
    std::size_t grid_rows = 8;
    std::size_t grid_cols = 8;
    double grid_mu = 0.1;
    const GeneratorParams* model = nullptr;
    double ridge_lambda = 1e-3;
};

DepthMap run_method(const MethodConfig& cfg, const SceneSample& scene,
                    const AnchorSet& anchors);

EvalRecord evaluate_method(const MethodConfig& cfg, const SceneSample& scene,
                           const AnchorSet& anchors, const std::string& regime_label);

struct AggregateRow {
    std::string method;
    std::string regime;
    std::string metric;
    double mean = 0.0;
    double median = 0.0;
    double weight = 0.0; // record count behind the row
};

struct BenchmarkReport {
    std::vector<EvalRecord> records;
    std::vector<AggregateRow> aggregates;
    std::vector<std::string> failures; // excluded records, one line each
};

// For every (scene, regime) the anchors are drawn once and shared by all
// methods. Record order is (scene, regime, method); deterministic given the
// seed. Failed records are logged into `failures` and excluded.
BenchmarkReport run_benchmark(const std::vector<SceneSample>& scenes,
                              const std::vector<MethodConfig>& methods,
                              const std::vector<std::string>& regimes,
                              std::uint64_t seed);

// Drop-anchor protocol: a 9-anchor start set from a 3x3 candidate grid with
// a per-scene seed, then evaluation at every odd survivor count.
BenchmarkReport run_drop_anchor(const std::vector<SceneSample>& scenes,
                                const MethodConfig& method, std::uint64_t seed);

// Weighted arithmetic mean; errors on zero total weight.
double weighted_mean(const std::vector<double>& values,
                     const std::vector<double>& weights);

double median_of(std::vector<double> values);

// records CSV: scene_id,method,regime,n_anchors,abs_rel,delta1,
//              invalid_fraction,anchor_hash
void write_records_csv(const std::filesystem::path& path,
                       const std::vector<EvalRecord>& records,
                       const std::vector<std::string>& header_comments);

// aggregate CSV: method,regime,metric,mean,median,weight. Table style is
// 2-decimal; `full_precision` switches to %.17g for the sidecar.
void write_aggregates_csv(const std::filesystem::path& path,
                          const std::vector<AggregateRow>& rows,
                          const std::vector<std::string>& header_comments,
                          bool full_precision);

} // namespace depthalign
