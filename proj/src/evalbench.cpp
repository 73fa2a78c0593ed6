#include "depthalign/evalbench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "depthalign/errors.hpp"
#include "depthalign/rng.hpp"

namespace depthalign {

namespace {

void check_metric_shapes(const DepthMap& pred, const DepthMap& gt,
                         const ValidityMask& mask) {
    if (pred.height() != gt.height() || pred.width() != gt.width() ||
        mask.height != gt.height() || mask.width != gt.width())
        throw DimensionError("metrics: dimension mismatch");
}

} // namespace

double abs_rel(const DepthMap& pred, const DepthMap& gt, const ValidityMask& mask) {
    check_metric_shapes(pred, gt, mask);
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        if (!mask.data[i] || !gt.mask.data[i] || !pred.mask.data[i]) continue;
        acc += std::abs(pred.values.data[i] - gt.values.data[i]) / gt.values.data[i];
        ++n;
    }
    if (n == 0) throw EmptyReductionError("abs_rel: empty joint mask");
    return acc / static_cast<double>(n);
}

double delta1(const DepthMap& pred, const DepthMap& gt, const ValidityMask& mask) {
    check_metric_shapes(pred, gt, mask);
    std::size_t hits = 0, n = 0;
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        if (!mask.data[i] || !gt.mask.data[i] || !pred.mask.data[i]) continue;
        const double ratio = std::max(pred.values.data[i] / gt.values.data[i],
                                      gt.values.data[i] / pred.values.data[i]);
        hits += ratio < 1.25;
        ++n;
    }
    if (n == 0) throw EmptyReductionError("delta1: empty joint mask");
    return static_cast<double>(hits) / static_cast<double>(n);
}

MetricPair compute_metrics(const DepthMap& pred, const DepthMap& gt,
                           const ValidityMask& mask) {
    check_metric_shapes(pred, gt, mask);
    std::size_t eval_pixels = 0, invalidated = 0;
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        if (!mask.data[i] || !gt.mask.data[i]) continue;
        ++eval_pixels;
        if (!pred.mask.data[i]) ++invalidated;
    }
    if (eval_pixels == 0)
        throw EmptyReductionError("compute_metrics: empty evaluation mask");

    MetricPair m;
    m.abs_rel = abs_rel(pred, gt, mask);
    m.delta1 = delta1(pred, gt, mask);
    m.invalid_fraction =
        static_cast<double>(invalidated) / static_cast<double>(eval_pixels);
    return m;
}

DepthMap run_method(const MethodConfig& cfg, const SceneSample& scene,
                    const AnchorSet& anchors) {
    if (cfg.name == "global")
        return apply_affine(scene.depth_mde, fit_global(scene.depth_mde, anchors));
    if (cfg.name == "piecewise")
        return apply_piecewise(scene.depth_mde,
                               fit_piecewise(scene.depth_mde, anchors,
                                             cfg.piecewise_bins_max));
    if (cfg.name == "lwlr") return fit_lwlr(scene.depth_mde, anchors, cfg.lwlr);
    if (cfg.name == "grid")
        return fit_grid(scene.depth_mde, anchors, cfg.grid_rows, cfg.grid_cols,
                        cfg.grid_mu)
            .depth;
    if (cfg.name == "region") {
        if (!scene.regions)
            throw CapabilityError("method \"region\" needs a label map, but scene " +
                                  scene.scene_id + " has no regions.anch");
        return fit_region(scene.depth_mde, anchors, *scene.regions).depth;
    }
    if (cfg.name == "basis") {
        if (!cfg.model)
            throw CapabilityError("method \"basis\" needs trained generator parameters");
        return run_basis_inference(*cfg.model, scene.features, scene.depth_mde,
                                   anchors, cfg.ridge_lambda)
            .depth;
    }
    throw DomainError("unknown method \"" + cfg.name +
                      "\" (expected global|piecewise|lwlr|grid|region|basis)");
}

EvalRecord evaluate_method(const MethodConfig& cfg, const SceneSample& scene,
                           const AnchorSet& anchors, const std::string& regime_label) {
    const DepthMap pred = run_method(cfg, scene, anchors);
    const MetricPair m = compute_metrics(pred, scene.depth_gt, scene.mask);

    EvalRecord rec;
    rec.scene_id = scene.scene_id;
    rec.method = cfg.name;
    rec.regime = regime_label;
    rec.n_anchors = anchors.size();
    rec.abs_rel = m.abs_rel;
    rec.delta1 = m.delta1;
    rec.invalid_fraction = m.invalid_fraction;
    rec.anchor_hash = anchor_set_hash(anchors);
    return rec;
}

double median_of(std::vector<double> values) {
    if (values.empty()) throw EmptyReductionError("median_of: empty input");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2]
                      : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double weighted_mean(const std::vector<double>& values,
                     const std::vector<double>& weights) {
    if (values.size() != weights.size())
        throw DimensionError("weighted_mean: value/weight length mismatch");
    if (values.empty()) throw EmptyReductionError("weighted_mean: empty input");
    double acc = 0.0, total = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        acc += values[i] * weights[i];
        total += weights[i];
    }
    if (total == 0.0) throw DomainError("weighted_mean: zero total weight");
    return acc / total;
}

namespace {

void append_aggregates(BenchmarkReport& report) {
    // Grouped by (method, regime) in first-appearance order.
    std::vector<std::pair<std::string, std::string>> keys;
    std::map<std::pair<std::string, std::string>, std::vector<const EvalRecord*>> groups;
    for (const auto& rec : report.records) {
        const auto key = std::make_pair(rec.method, rec.regime);
        if (groups.find(key) == groups.end()) keys.push_back(key);
        groups[key].push_back(&rec);
    }
    for (const auto& key : keys) {
        const auto& group = groups[key];
        std::vector<double> ar, d1;
        for (const auto* rec : group) {
            ar.push_back(rec->abs_rel);
            d1.push_back(rec->delta1);
        }
        const auto weight = static_cast<double>(group.size());
        const std::vector<double> ones(group.size(), 1.0);
        report.aggregates.push_back(AggregateRow{key.first, key.second, "abs_rel",
                                                 weighted_mean(ar, ones), median_of(ar),
                                                 weight});
        report.aggregates.push_back(AggregateRow{key.first, key.second, "delta1",
                                                 weighted_mean(d1, ones), median_of(d1),
                                                 weight});
    }
}

} // namespace

BenchmarkReport run_benchmark(const std::vector<SceneSample>& scenes,
                              const std::vector<MethodConfig>& methods,
                              const std::vector<std::string>& regimes,
                              std::uint64_t seed) {
    if (scenes.empty()) throw InsufficiencyError("run_benchmark: empty corpus");

    BenchmarkReport report;
    for (const auto& scene : scenes) {
        for (const auto& regime_name : regimes) {
            AnchorSet anchors;
            try {
                anchors = sample_anchors(
                    scene.depth_gt, regime_by_name(regime_name),
                    derive_seed(seed, scene.scene_id + ":" + regime_name));
            } catch (const Error& e) {
                report.failures.push_back(scene.scene_id + "," + regime_name +
                                          ",<anchor sampling>," + e.what());
                continue;
            }
            for (const auto& method : methods) {
                try {
                    report.records.push_back(
                        evaluate_method(method, scene, anchors, regime_name));
                } catch (const Error& e) {
                    report.failures.push_back(scene.scene_id + "," + regime_name + "," +
                                              method.name + "," + e.what());
                }
            }
        }
    }
    append_aggregates(report);
    return report;
}

BenchmarkReport run_drop_anchor(const std::vector<SceneSample>& scenes,
                                const MethodConfig& method, std::uint64_t seed) {
    if (scenes.empty()) throw InsufficiencyError("run_drop_anchor: empty corpus");

    const AnchorRegime start_regime{9, 9, 3, 3};
    BenchmarkReport report;
    for (const auto& scene : scenes) {
        AnchorSet start;
        std::vector<std::size_t> sequence;
        try {
            start = sample_anchors(scene.depth_gt, start_regime,
                                   derive_seed(seed, scene.scene_id + ":drop"));
            sequence = drop_anchor_sequence(start);
        } catch (const Error& e) {
            report.failures.push_back(scene.scene_id + ",drop,<anchor setup>," + e.what());
            continue;
        }
        for (const std::size_t n : {std::size_t{9}, std::size_t{7}, std::size_t{5},
                                    std::size_t{3}, std::size_t{1}}) {
            if (n > start.size()) continue;
            try {
                const AnchorSet survivors = take_first_n(start, sequence, n);
                report.records.push_back(evaluate_method(
                    method, scene, survivors, "drop" + std::to_string(n)));
            } catch (const Error& e) {
                report.failures.push_back(scene.scene_id + ",drop" + std::to_string(n) +
                                          "," + method.name + "," + e.what());
            }
        }
    }
    append_aggregates(report);
    return report;
}

namespace {

std::string fmt_full(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_table(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

} // namespace

void write_records_csv(const std::filesystem::path& path,
                       const std::vector<EvalRecord>& records,
                       const std::vector<std::string>& header_comments) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_records_csv: cannot open " + path.string());
    for (const auto& line : header_comments) out << "# " << line << '\n';
    out << "scene_id,method,regime,n_anchors,abs_rel,delta1,invalid_fraction,anchor_hash\n";
    for (const auto& r : records) {
        out << r.scene_id << ',' << r.method << ',' << r.regime << ',' << r.n_anchors
            << ',' << fmt_full(r.abs_rel) << ',' << fmt_full(r.delta1) << ','
            << fmt_full(r.invalid_fraction) << ',' << r.anchor_hash << '\n';
    }
}

void write_aggregates_csv(const std::filesystem::path& path,
                          const std::vector<AggregateRow>& rows,
                          const std::vector<std::string>& header_comments,
                          bool full_precision) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_aggregates_csv: cannot open " + path.string());
    for (const auto& line : header_comments) out << "# " << line << '\n';
    out << "method,regime,metric,mean,median,weight\n";
    for (const auto& r : rows) {
        const std::string mean = full_precision ? fmt_full(r.mean) : fmt_table(r.mean);
        const std::string median =
            full_precision ? fmt_full(r.median) : fmt_table(r.median);
        out << r.method << ',' << r.regime << ',' << r.metric << ',' << mean << ','
            << median << ',' << fmt_full(r.weight) << '\n';
    }
}

} // namespace depthalign
