#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "depthalign/field.hpp"

namespace depthalign {

// Families of the injected scale/shift bias. Each mirrors one of the model
// classes the baseline aligners assume, so exact-recovery constructions are
// possible; `Mixed` sums a global term with one spatial family.
enum class BiasFamily {
    Global,
    Affine,
    Regions,
    GridSmooth,
    DepthDependent,
    Mixed,
};

BiasFamily bias_family_by_name(const std::string& name);
std::string bias_family_name(BiasFamily f);

struct ScenarioSpec {
    BiasFamily bias_family = BiasFamily::Mixed;
    double noise_std = 0.0; // multiplicative log-noise on the MDE depth
    std::size_t height = 96;
    std::size_t width = 128;
    std::size_t region_count = 4;
    std::uint64_t seed = 0;
};

// Synthetic scene with known ground truth:
//   depth_mde = depth_gt * exp(-true_log_scale) * exp(noise)
// so applying true_log_scale to depth_mde recovers depth_gt up to the
// injected noise.
struct SceneSample {
    std::string scene_id;
    DepthMap depth_gt;
    DepthMap depth_mde;
    FieldStack features; // 8 channels, deliberately informative of the bias
    ValidityMask mask;
    std::optional<ScalarField> regions; // label field, when the bias has one
    ScalarField true_log_scale;
    BiasFamily family = BiasFamily::Global;
    double noise_std = 0.0;
    std::uint64_t seed = 0;
};

constexpr std::size_t kSyntheticFeatureChannels = 8;

SceneSample generate_scene(const ScenarioSpec& spec, const std::string& scene_id);

// Scene directory layout:
//   depth_gt.anch, depth_mde.anch, features.anch, mask.anch,
//   true_log_scale.anch, optional regions.anch, meta.txt (key=value)
void write_scene(const std::filesystem::path& dir, const SceneSample& sample);
SceneSample load_scene(const std::filesystem::path& dir);

struct SplitRatios {
    double train = 0.6;
    double val = 0.2;
    double test = 0.2;
};

// Split directories under `out_dir` plus a manifest.csv (scene_id,split).
// Scene ids are disjoint across splits; every scene seeds its own RNG from
// (seed, scene_id) so generation order cannot change the output. Refuses an
// existing output directory unless `overwrite`.
void generate_dataset(const ScenarioSpec& spec_template, std::size_t n_scenes,
                      const SplitRatios& ratios, std::uint64_t seed,
                      const std::filesystem::path& out_dir, bool overwrite);

struct CorpusEntry {
    std::string scene_id;
    std::string split;
    std::filesystem::path dir;
};

std::vector<CorpusEntry> read_corpus_manifest(const std::filesystem::path& root);

} // namespace depthalign
