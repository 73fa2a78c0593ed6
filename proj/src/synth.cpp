#include "depthalign/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

#include "depthalign/errors.hpp"
#include "depthalign/rng.hpp"
#include "depthalign/tensor_io.hpp"

namespace depthalign {

BiasFamily bias_family_by_name(const std::string& name) {
    if (name == "global") return BiasFamily::Global;
    if (name == "affine") return BiasFamily::Affine;
    if (name == "regions") return BiasFamily::Regions;
    if (name == "grid_smooth") return BiasFamily::GridSmooth;
    if (name == "depth_dependent") return BiasFamily::DepthDependent;
    if (name == "mixed") return BiasFamily::Mixed;
    throw DomainError("unknown bias family \"" + name + "\"");
}

std::string bias_family_name(BiasFamily f) {
    switch (f) {
        case BiasFamily::Global: return "global";
        case BiasFamily::Affine: return "affine";
        case BiasFamily::Regions: return "regions";
        case BiasFamily::GridSmooth: return "grid_smooth";
        case BiasFamily::DepthDependent: return "depth_dependent";
        case BiasFamily::Mixed: return "mixed";
    }
    return "unknown";
}

namespace {

// Smooth random field as a small cosine mixture, zero mean, approximately
// unit amplitude.
ScalarField smooth_field(std::size_t h, std::size_t w, Rng& rng, int waves = 6) {
    ScalarField f(h, w, 0.0);
    for (int k = 0; k < waves; ++k) {
        const double fr = rng.uniform(0.5, 3.0);
        const double fc = rng.uniform(0.5, 3.0);
        const double phase = rng.uniform(0.0, 2.0 * M_PI);
        const double amp = rng.uniform(0.4, 1.0) / waves;
        const double sr = rng.uniform() < 0.5 ? -1.0 : 1.0;
        for (std::size_t r = 0; r < h; ++r) {
            const double rr = static_cast<double>(r) / static_cast<double>(h);
            for (std::size_t c = 0; c < w; ++c) {
                const double cc = static_cast<double>(c) / static_cast<double>(w);
                f.at(r, c) += amp * std::cos(2.0 * M_PI * (sr * fr * rr + fc * cc) + phase);
            }
        }
    }
    return f;
}

// Two-pass separable box blur.
ScalarField box_blur(const ScalarField& f, std::size_t radius, int passes = 2) {
    ScalarField cur = f;
    for (int pass = 0; pass < passes; ++pass) {
        ScalarField tmp(cur.height, cur.width, 0.0);
        for (std::size_t r = 0; r < cur.height; ++r) {
            for (std::size_t c = 0; c < cur.width; ++c) {
                double acc = 0.0;
                std::size_t n = 0;
                const std::size_t lo = c > radius ? c - radius : 0;
                const std::size_t hi = std::min(cur.width - 1, c + radius);
                for (std::size_t cc = lo; cc <= hi; ++cc) {
                    acc += cur.at(r, cc);
                    ++n;
                }
                tmp.at(r, c) = acc / static_cast<double>(n);
            }
        }
        ScalarField out(cur.height, cur.width, 0.0);
        for (std::size_t r = 0; r < cur.height; ++r) {
            for (std::size_t c = 0; c < cur.width; ++c) {
                double acc = 0.0;
                std::size_t n = 0;
                const std::size_t lo = r > radius ? r - radius : 0;
                const std::size_t hi = std::min(cur.height - 1, r + radius);
                for (std::size_t rr = lo; rr <= hi; ++rr) {
                    acc += tmp.at(rr, c);
                    ++n;
                }
                out.at(r, c) = acc / static_cast<double>(n);
            }
        }
        cur = std::move(out);
    }
    return cur;
}

struct VoronoiPartition {
    std::vector<double> site_r, site_c;
    ScalarField labels; // integer site index per pixel
};

VoronoiPartition voronoi(std::size_t h, std::size_t w, std::size_t sites, Rng& rng) {
    VoronoiPartition part;
    part.labels = ScalarField(h, w, 0.0);
    for (std::size_t s = 0; s < sites; ++s) {
        part.site_r.push_back(rng.uniform(0.0, static_cast<double>(h - 1)));
        part.site_c.push_back(rng.uniform(0.0, static_cast<double>(w - 1)));
    }
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            double best = 1e300;
            std::size_t best_s = 0;
            for (std::size_t s = 0; s < sites; ++s) {
                const double dr = static_cast<double>(r) - part.site_r[s];
                const double dc = static_cast<double>(c) - part.site_c[s];
                const double d2 = dr * dr + dc * dc;
                if (d2 < best) {
                    best = d2;
                    best_s = s;
                }
            }
            part.labels.at(r, c) = static_cast<double>(best_s);
        }
    }
    return part;
}

// Bilinear surface from a coarse random vertex grid.
ScalarField bilinear_surface(std::size_t h, std::size_t w, std::size_t vr,
                             std::size_t vc, double lo, double hi, Rng& rng) {
    std::vector<double> vals(vr * vc);
    for (auto& v : vals) v = rng.uniform(lo, hi);
    ScalarField f(h, w, 0.0);
    for (std::size_t r = 0; r < h; ++r) {
        const double fr = h > 1 ? static_cast<double>(r) * static_cast<double>(vr - 1) /
                                      static_cast<double>(h - 1)
                                : 0.0;
        const std::size_t i = std::min(static_cast<std::size_t>(fr), vr - 2);
        const double a = fr - static_cast<double>(i);
        for (std::size_t c = 0; c < w; ++c) {
            const double fc = w > 1 ? static_cast<double>(c) * static_cast<double>(vc - 1) /
                                          static_cast<double>(w - 1)
                                    : 0.0;
            const std::size_t j = std::min(static_cast<std::size_t>(fc), vc - 2);
            const double b = fc - static_cast<double>(j);
            f.at(r, c) = (1 - a) * (1 - b) * vals[i * vc + j] +
                         (1 - a) * b * vals[i * vc + j + 1] +
                         a * (1 - b) * vals[(i + 1) * vc + j] +
                         a * b * vals[(i + 1) * vc + j + 1];
        }
    }
    return f;
}

ScalarField make_ground_truth(std::size_t h, std::size_t w, Rng& rng) {
    // Ground plane rising with the row index plus a few smooth bumps,
    // remapped into a comfortably positive range.
    ScalarField gt(h, w, 0.0);
    const double base = rng.uniform(2.0, 6.0);
    const double slope = rng.uniform(4.0, 20.0);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            gt.at(r, c) = base + slope * static_cast<double>(r) / static_cast<double>(h);

    const double diag = std::hypot(static_cast<double>(h), static_cast<double>(w));
    const int bumps = static_cast<int>(rng.uniform_int(4, 8));
    for (int k = 0; k < bumps; ++k) {
        const double cr = rng.uniform(0.0, static_cast<double>(h - 1));
        const double cc = rng.uniform(0.0, static_cast<double>(w - 1));
        const double amp = rng.uniform(-5.0, 9.0);
        const double sig = rng.uniform(0.06, 0.2) * diag;
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                const double dr = static_cast<double>(r) - cr;
                const double dc = static_cast<double>(c) - cc;
                gt.at(r, c) += amp * std::exp(-(dr * dr + dc * dc) / (2.0 * sig * sig));
            }
        }
    }

    double lo = gt.data[0], hi = gt.data[0];
    for (double v : gt.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double target_lo = rng.uniform(0.6, 1.5);
    const double target_hi = rng.uniform(18.0, 50.0);
    const double span = hi > lo ? hi - lo : 1.0;
    for (double& v : gt.data)
        v = target_lo + (v - lo) / span * (target_hi - target_lo);
    return gt;
}

ValidityMask make_blob_mask(std::size_t h, std::size_t w, Rng& rng) {
    ValidityMask mask(h, w, true);
    const double diag = std::hypot(static_cast<double>(h), static_cast<double>(w));
    const std::size_t target_invalid = static_cast<std::size_t>(0.03 * static_cast<double>(h * w));
    std::size_t invalid = 0;
    for (int attempt = 0; attempt < 16 && invalid < target_invalid; ++attempt) {
        const double cr = rng.uniform(0.0, static_cast<double>(h - 1));
        const double cc = rng.uniform(0.0, static_cast<double>(w - 1));
        const double rad = rng.uniform(0.02, 0.06) * diag;
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                if (!mask.at(r, c)) continue;
                const double dr = static_cast<double>(r) - cr;
                const double dc = static_cast<double>(c) - cc;
                if (dr * dr + dc * dc <= rad * rad) {
                    mask.set(r, c, false);
                    ++invalid;
                }
            }
        }
    }
    return mask;
}

struct BiasField {
    ScalarField log_scale;
    // The part of the field the features are allowed to leak; equal to
    // log_scale except for the mixed family's unexplained residual.
    std::optional<ScalarField> leak;
    std::optional<ScalarField> labels;
    std::optional<VoronoiPartition> partition;
};

BiasField make_bias(BiasFamily family, const ScalarField& gt, std::size_t region_count,
                    double amplitude, Rng& rng) {
    const std::size_t h = gt.height, w = gt.width;
    BiasField out;
    switch (family) {
        case BiasFamily::Global: {
            const double c = rng.uniform(-amplitude, amplitude);
            out.log_scale = ScalarField(h, w, c);
            break;
        }
        case BiasFamily::Affine: {
            const double s = std::exp(rng.uniform(-amplitude, amplitude));
            double gt_min = gt.data[0];
            for (double v : gt.data) gt_min = std::min(gt_min, v);
            double t = 0.0;
            do {
                t = rng.uniform(-1.0, 1.0);
            } while (gt_min - t < 0.05); // keep the implied MDE depth positive
            out.log_scale = ScalarField(h, w, 0.0);
            for (std::size_t i = 0; i < h * w; ++i)
                out.log_scale.data[i] = std::log(s * gt.data[i] / (gt.data[i] - t));
            break;
        }
        case BiasFamily::Regions: {
            out.partition = voronoi(h, w, region_count, rng);
            std::vector<double> consts(region_count);
            for (auto& c : consts) c = rng.uniform(-amplitude, amplitude);
            out.log_scale = ScalarField(h, w, 0.0);
            for (std::size_t i = 0; i < h * w; ++i)
                out.log_scale.data[i] =
                    consts[static_cast<std::size_t>(out.partition->labels.data[i])];
            out.labels = out.partition->labels;
            break;
        }
        case BiasFamily::GridSmooth: {
            const std::size_t vr = static_cast<std::size_t>(rng.uniform_int(3, 5));
            const std::size_t vc = static_cast<std::size_t>(rng.uniform_int(3, 6));
            out.log_scale = bilinear_surface(h, w, vr, vc, -amplitude, amplitude, rng);
            break;
        }
        case BiasFamily::DepthDependent: {
            double lo = std::log(gt.data[0]), hi = lo;
            for (double v : gt.data) {
                lo = std::min(lo, std::log(v));
                hi = std::max(hi, std::log(v));
            }
            const double span = hi > lo ? hi - lo : 1.0;
            const double c0 = rng.uniform(-0.5 * amplitude, 0.5 * amplitude);
            double c1 = rng.uniform(0.3 * amplitude, amplitude);
            if (rng.uniform() < 0.5) c1 = -c1;
            out.log_scale = ScalarField(h, w, 0.0);
            for (std::size_t i = 0; i < h * w; ++i) {
                const double z = 2.0 * (std::log(gt.data[i]) - lo) / span - 1.0;
                out.log_scale.data[i] = c0 + c1 * z;
            }
            break;
        }
        case BiasFamily::Mixed: {
            // Global component dominates; a spatial family rides on top at a
            // reduced amplitude, plus a small smooth residual that the
            // feature channels do not encode. The residual gives every
            // aligner the same irreducible floor regardless of anchor count.
            const double g = rng.uniform(-0.5, 0.5);
            const int pick = static_cast<int>(rng.uniform_int(0, 2));
            const BiasFamily spatial = pick == 0   ? BiasFamily::Regions
                                       : pick == 1 ? BiasFamily::GridSmooth
                                                   : BiasFamily::DepthDependent;
            BiasField inner = make_bias(spatial, gt, region_count, 0.15 * amplitude, rng);
            out = std::move(inner);
            for (double& v : out.log_scale.data) v += g;
            out.leak = out.log_scale;
            const ScalarField residual = smooth_field(h, w, rng);
            for (std::size_t i = 0; i < h * w; ++i)
                out.log_scale.data[i] += 0.085 * amplitude * residual.data[i];
            break;
        }
    }
    return out;
}

} // namespace

SceneSample generate_scene(const ScenarioSpec& spec, const std::string& scene_id) {
    if (spec.noise_std < 0.0)
        throw DomainError("generate_scene: noise_std must be >= 0");
    if (spec.bias_family == BiasFamily::Regions && spec.region_count < 1)
        throw DomainError("generate_scene: region_count must be >= 1");

    const std::size_t h = spec.height, w = spec.width;
    Rng rng(derive_seed(spec.seed, scene_id));

    const ScalarField gt = make_ground_truth(h, w, rng);
    const ValidityMask mask = make_blob_mask(h, w, rng);

    BiasField bias = make_bias(spec.bias_family, gt, spec.region_count, 0.7, rng);

    ScalarField mde(h, w, 0.0);
    for (std::size_t i = 0; i < h * w; ++i) {
        double v = gt.data[i] * std::exp(-bias.log_scale.data[i]);
        if (spec.noise_std > 0.0) v *= std::exp(spec.noise_std * rng.normal());
        mde.data[i] = v;
    }

    // Features deliberately leak the bias structure: soft partition
    // indicators, a distorted copy of the log-scale field, and smooth
    // nuisance fields.
    FieldStack features(kSyntheticFeatureChannels, h, w, 0.0);
    {
        const VoronoiPartition part =
            bias.partition ? *bias.partition : voronoi(h, w, 4, rng);
        const double tau = 0.15 * std::hypot(static_cast<double>(h), static_cast<double>(w));
        const std::size_t groups = 4;
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                double weights[4] = {0, 0, 0, 0};
                double total = 0.0;
                for (std::size_t s = 0; s < part.site_r.size(); ++s) {
                    const double dr = static_cast<double>(r) - part.site_r[s];
                    const double dc = static_cast<double>(c) - part.site_c[s];
                    const double wgt = std::exp(-(dr * dr + dc * dc) / (2.0 * tau * tau));
                    weights[s % groups] += wgt;
                    total += wgt;
                }
                for (std::size_t g = 0; g < groups; ++g)
                    features.at(g, r, c) = total > 0.0 ? weights[g] / total : 0.0;
            }
        }

        const std::size_t radius = std::max<std::size_t>(1, std::min(h, w) / 16);
        const ScalarField blurred =
            box_blur(bias.leak ? *bias.leak : bias.log_scale, radius);
        const double gain = rng.uniform(0.85, 1.2);
        const ScalarField distortion = smooth_field(h, w, rng);
        for (std::size_t i = 0; i < h * w; ++i)
            features.plane(4)[i] = gain * blurred.data[i] + 0.05 * distortion.data[i];

        for (std::size_t ch = 5; ch < kSyntheticFeatureChannels; ++ch) {
            const ScalarField nuisance = smooth_field(h, w, rng);
            std::memcpy(features.plane(ch), nuisance.data.data(), sizeof(double) * h * w);
        }
    }

    SceneSample sample;
    sample.scene_id = scene_id;
    sample.depth_gt = DepthMap(gt, mask);
    sample.depth_mde = DepthMap(std::move(mde), mask);
    sample.features = std::move(features);
    sample.mask = mask;
    sample.regions = bias.labels;
    sample.true_log_scale = std::move(bias.log_scale);
    sample.family = spec.bias_family;
    sample.noise_std = spec.noise_std;
    sample.seed = spec.seed;
    return sample;
}

void write_scene(const std::filesystem::path& dir, const SceneSample& sample) {
    std::filesystem::create_directories(dir);
    write_tensor(dir / "depth_gt.anch", to_tensor(sample.depth_gt.values));
    write_tensor(dir / "depth_mde.anch", to_tensor(sample.depth_mde.values));
    write_tensor(dir / "features.anch", to_tensor(sample.features));
    write_tensor(dir / "mask.anch", to_tensor(sample.mask));
    write_tensor(dir / "true_log_scale.anch", to_tensor(sample.true_log_scale));
    if (sample.regions) {
        Tensor t = to_tensor(*sample.regions, TensorDtype::Uint8);
        write_tensor(dir / "regions.anch", t);
    }

    std::ofstream meta(dir / "meta.txt", std::ios::trunc);
    if (!meta) throw IoError("write_scene: cannot open meta.txt in " + dir.string());
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", sample.noise_std);
    meta << "family=" << bias_family_name(sample.family) << '\n';
    meta << "seed=" << sample.seed << '\n';
    meta << "noise_std=" << buf << '\n';
}

SceneSample load_scene(const std::filesystem::path& dir) {
    SceneSample sample;
    sample.scene_id = dir.filename().string();
    const ValidityMask mask = tensor_to_mask(read_tensor(dir / "mask.anch"));
    sample.mask = mask;
    sample.depth_gt =
        DepthMap(tensor_to_scalar_field(read_tensor(dir / "depth_gt.anch")), mask);
    sample.depth_mde =
        DepthMap(tensor_to_scalar_field(read_tensor(dir / "depth_mde.anch")), mask);
    sample.features = tensor_to_field_stack(read_tensor(dir / "features.anch"));
    sample.true_log_scale =
        tensor_to_scalar_field(read_tensor(dir / "true_log_scale.anch"));
    if (std::filesystem::exists(dir / "regions.anch"))
        sample.regions = tensor_to_scalar_field(read_tensor(dir / "regions.anch"));

    std::ifstream meta(dir / "meta.txt");
    std::string line;
    while (std::getline(meta, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "family") sample.family = bias_family_by_name(value);
        else if (key == "seed") sample.seed = std::stoull(value);
        else if (key == "noise_std") sample.noise_std = std::stod(value);
    }
    return sample;
}

void generate_dataset(const ScenarioSpec& spec_template, std::size_t n_scenes,
                      const SplitRatios& ratios, std::uint64_t seed,
                      const std::filesystem::path& out_dir, bool overwrite) {
    if (n_scenes == 0) throw DomainError("generate_dataset: n_scenes must be >= 1");
    const double total = ratios.train + ratios.val + ratios.test;
    if (std::abs(total - 1.0) > 1e-9)
        throw DomainError("generate_dataset: split ratios must sum to 1");

    if (std::filesystem::exists(out_dir)) {
        if (!overwrite)
            throw IoError("generate_dataset: output directory " + out_dir.string() +
                          " exists; pass the overwrite flag to replace it");
        std::filesystem::remove_all(out_dir);
    }

    const auto n_train = static_cast<std::size_t>(
        std::llround(ratios.train * static_cast<double>(n_scenes)));
    const auto n_val = static_cast<std::size_t>(
        std::llround(ratios.val * static_cast<double>(n_scenes)));
    if (n_train + n_val > n_scenes)
        throw DomainError("generate_dataset: split ratios leave no test scenes");

    const std::filesystem::path tmp = out_dir.string() + ".tmp";
    std::filesystem::remove_all(tmp);
    std::filesystem::create_directories(tmp);

    std::ofstream manifest(tmp / "manifest.csv", std::ios::trunc);
    if (!manifest) throw IoError("generate_dataset: cannot write manifest");
    manifest << "scene_id,split\n";

    for (std::size_t i = 0; i < n_scenes; ++i) {
        char id_buf[32];
        std::snprintf(id_buf, sizeof id_buf, "scene_%05zu", i);
        const std::string scene_id = id_buf;
        const std::string split =
            i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");

        ScenarioSpec spec = spec_template;
        spec.seed = seed;
        const SceneSample sample = generate_scene(spec, scene_id);
        write_scene(tmp / split / scene_id, sample);
        manifest << scene_id << ',' << split << '\n';
    }
    manifest.close();

    std::filesystem::rename(tmp, out_dir);
}

std::vector<CorpusEntry> read_corpus_manifest(const std::filesystem::path& root) {
    std::ifstream in(root / "manifest.csv");
    if (!in)
        throw IoError("read_corpus_manifest: cannot open " + (root / "manifest.csv").string());
    std::string line;
    if (!std::getline(in, line) || line != "scene_id,split")
        throw FormatError("corpus manifest missing \"scene_id,split\" header", 0);

    std::vector<CorpusEntry> entries;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw FormatError("corpus manifest line without a comma", 0);
        CorpusEntry e;
        e.scene_id = line.substr(0, comma);
        e.split = line.substr(comma + 1);
        e.dir = root / e.split / e.scene_id;
        entries.push_back(std::move(e));
    }
    return entries;
}

} // namespace depthalign
