#include "deid/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "deid/blend.hpp"
#include "deid/evalharness.hpp"

namespace deid {

using nlohmann::json;
namespace fs = std::filesystem;

OpenModels::~OpenModels() {
    for (auto& c : clients)
        if (c) {
            try {
                c->shutdown();
            } catch (const std::exception&) {
            }
        }
}

namespace {

std::shared_ptr<wire::WireClient> connect(const ModelSource& src, const PipelineConfig& cfg) {
    std::unique_ptr<wire::Channel> ch;
    if (src.kind == SourceKind::Stdio) ch = std::make_unique<wire::ProcessChannel>(src.command);
    else ch = wire::connect_tcp(src.host, static_cast<std::uint16_t>(src.port));
    const auto timeout = std::chrono::milliseconds(static_cast<long long>(cfg.timeout_seconds * 1000.0));
    auto client = std::make_shared<wire::WireClient>(std::move(ch), timeout);
    client->handshake();
    return client;
}

}  // namespace

OpenModels open_models(const PipelineConfig& cfg) {
    OpenModels m;
    auto extractor = [&](const ModelSource& src, ModelRole role) -> std::shared_ptr<const Extractor> {
        if (src.kind == SourceKind::Toy) return make_toy_extractor(src.toy_spec(role));
        auto client = connect(src, cfg);
        m.clients.push_back(client);
        auto ex = std::make_shared<wire::RemoteExtractor>(client);
        if (ex->spec().role != role)
            throw PipelineError("remote model serves role " + to_string(ex->spec().role) + ", expected " +
                                to_string(role));
        return ex;
    };
    if (cfg.generator.kind == SourceKind::Toy) {
        m.models.generator = make_toy_generator(cfg.generator.toy_spec(ModelRole::Generator));
    } else {
        auto client = connect(cfg.generator, cfg);
        m.clients.push_back(client);
        m.models.generator = std::make_shared<wire::RemoteGenerator>(client);
    }
    m.models.perceptual = extractor(cfg.perceptual, ModelRole::Perceptual);
    m.models.identity = extractor(cfg.identity, ModelRole::Identity);
    return m;
}

FaceRect premasked_rect(const Image& img) {
    FaceRect r{img.width(), img.height(), 0, 0};
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < img.channels(); ++c)
                if (img.at(y, x, c) != 0.0) {
                    r.x0 = std::min(r.x0, x);
                    r.y0 = std::min(r.y0, y);
                    r.x1 = std::max(r.x1, x + 1);
                    r.y1 = std::max(r.y1, y + 1);
                }
    if (r.x0 >= r.x1) throw PipelineError("premasked image is entirely black");
    return r;
}

DeidResult deidentify(const Image& image, const std::optional<LandmarkSet>& landmarks, const PipelineConfig& cfg,
                      const ModelSet& models) {
    cfg.validate();
    const Generator& gen = *models.generator;
    if (gen.out_channels() != image.channels())
        throw PipelineError("generator produces " + std::to_string(gen.out_channels()) + " channels but image has " +
                            std::to_string(image.channels()));
    const Dims dims{image.height(), image.width()};

    DeidResult r;
    if (landmarks) {
        r.rect = face_rect(*landmarks, cfg.mask_margin, dims);
        r.masked = apply_face_mask(image, r.rect);
    } else {
        if (cfg.align) throw PipelineError("alignment needs landmarks");
        r.rect = premasked_rect(image);
        r.masked = image;
    }

    Image target = r.masked;
    std::optional<AlignTemplate> tmpl;
    if (cfg.align) {
        tmpl = AlignTemplate::canonical(cfg.align_size > 0 ? cfg.align_size : gen.out_height());
        AlignedFace aligned = align_face(r.masked, *landmarks, *tmpl);
        target = std::move(aligned.image);
        r.alignment = aligned.transform;
    }

    r.opt = optimize(target, models, cfg.loss, cfg.opt);

    if (r.alignment) {
        r.generated = warp_to_source(resize_bilinear(r.opt.image, tmpl->height, tmpl->width), *r.alignment, dims);
    } else {
        r.generated = resize_bilinear(r.opt.image, dims.height, dims.width);
    }

    r.mask = build_blend_mask(r.rect, dims, cfg.mask_feather);
    const FilterBank bank = FilterBank::standard(cfg.blend_levels);
    Image merged = cfg.blend_mode == BlendMode::Complete
                       ? merge_complete(image, r.generated, r.mask, bank, cfg.mask_role)
                       : merge_literal(image, r.generated, r.mask, bank);
    if (cfg.histogram_match) merged = histogram_match(merged, image);
    r.output = clamp01(std::move(merged));
    r.metrics = compare_images(image, r.output);
    return r;
}

std::uint64_t image_seed(std::uint64_t base, const std::string& image_id) {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char ch : image_id) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    std::uint64_t z = base ^ h;  // splitmix64 finalizer
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

namespace {

json rect_json(const FaceRect& r) { return {{"x0", r.x0}, {"y0", r.y0}, {"x1", r.x1}, {"y1", r.y1}}; }

json loss_json(const LossTerms& t) { return {{"l_per", t.l_per}, {"l_did", t.l_did}, {"l_final", t.l_final}}; }

LossTerms loss_from_json(const json& j) {
    return {j.at("l_per").get<double>(), j.at("l_did").get<double>(), j.at("l_final").get<double>()};
}

double psnr_from_json(const json& j) {
    if (j.is_string()) {
        if (j.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
        throw PipelineError("bad psnr value in manifest");
    }
    return j.get<double>();
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw PipelineError("cannot write " + path.string());
    out << text;
    if (!out) throw PipelineError("write failed for " + path.string());
}

}  // namespace

json to_json(const RunManifest& m) {
    json j;
    j["tool_version"] = m.tool_version;
    j["command"] = "deidentify";
    j["inputs"] = {{"image", m.paths.input.string()},
                   {"landmarks", m.paths.landmarks ? json(m.paths.landmarks->string()) : json(nullptr)},
                   {"premasked", !m.paths.landmarks.has_value()}};
    j["outputs"] = {{"image", m.paths.output.string()},
                    {"trace", m.paths.trace.string()},
                    {"manifest", m.paths.manifest.string()}};
    j["config"] = to_json(m.config);
    j["conventions"] = {{"filter_bank", "sigma_1 = 0, sigma_l = 2^(l-2)"},
                        {"mask_role", to_string(m.config.mask_role)},
                        {"blend_mode", to_string(m.config.blend_mode)},
                        {"loss_gradient_norm_smoothing", kNormSmoothing}};
    json specs = json::array();
    for (const auto& s : m.model_specs) specs.push_back(to_json(s));
    j["models"] = specs;
    j["face_rect"] = rect_json(m.rect);
    json trace = json::array();
    for (const auto& t : m.trace) trace.push_back({t.l_per, t.l_did, t.l_final});
    j["optimization"] = {{"iterations", m.iterations}, {"best_iteration", m.best_iteration},
                         {"initial", loss_json(m.initial)}, {"best", loss_json(m.best)},
                         {"trace_columns", {"l_per", "l_did", "l_final"}}, {"trace", trace}};
    j["metrics"] = to_json(m.metrics);
    j["timings"] = {{"total_seconds", m.seconds_total}, {"optimize_seconds", m.seconds_optimize}};
    return j;
}

RunManifest manifest_from_json(const json& j) {
    try {
        RunManifest m;
        m.tool_version = j.at("tool_version").get<std::string>();
        const auto& in = j.at("inputs");
        m.paths.input = in.at("image").get<std::string>();
        if (!in.at("landmarks").is_null()) m.paths.landmarks = in.at("landmarks").get<std::string>();
        const auto& out = j.at("outputs");
        m.paths.output = out.at("image").get<std::string>();
        m.paths.trace = out.at("trace").get<std::string>();
        m.paths.manifest = out.at("manifest").get<std::string>();
        m.config = config_from_json(j.at("config"));
        for (const auto& s : j.at("models")) m.model_specs.push_back(model_spec_from_json(s));
        const auto& r = j.at("face_rect");
        m.rect = {r.at("x0").get<int>(), r.at("y0").get<int>(), r.at("x1").get<int>(), r.at("y1").get<int>()};
        const auto& o = j.at("optimization");
        m.iterations = o.at("iterations").get<int>();
        m.best_iteration = o.at("best_iteration").get<int>();
        m.initial = loss_from_json(o.at("initial"));
        m.best = loss_from_json(o.at("best"));
        for (const auto& t : o.value("trace", json::array()))
            m.trace.push_back({t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()});
        const auto& met = j.at("metrics");
        m.metrics = {met.at("ssim").get<double>(), psnr_from_json(met.at("psnr")), met.at("mse").get<double>()};
        if (j.contains("timings")) {
            m.seconds_total = j["timings"].value("total_seconds", 0.0);
            m.seconds_optimize = j["timings"].value("optimize_seconds", 0.0);
        }
        return m;
    } catch (const json::exception& e) {
        throw PipelineError(std::string("malformed run manifest: ") + e.what());
    }
}

RunManifest read_manifest_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw PipelineError("cannot open manifest " + path.string());
    try {
        return manifest_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw PipelineError("manifest " + path.string() + " is not valid JSON: " + e.what());
    }
}

RunManifest run_deidentify(const RunPaths& paths, const PipelineConfig& cfg, const ModelSet& models) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    const Image image = load_image(paths.input);
    std::optional<LandmarkSet> lm;
    if (paths.landmarks) lm = load_landmarks(*paths.landmarks, Dims{image.height(), image.width()});

    const auto t1 = clock::now();
    const DeidResult r = deidentify(image, lm, cfg, models);
    const auto t2 = clock::now();

    if (paths.output.has_parent_path()) fs::create_directories(paths.output.parent_path());
    save_image(r.output, paths.output);
    std::ostringstream trace;
    write_trace_csv(trace, r.opt.trace);
    write_text(paths.trace, trace.str());

    RunManifest m;
    m.paths = paths;
    m.config = cfg;
    m.model_specs = {models.generator->spec(), models.perceptual->spec(), models.identity->spec()};
    m.metrics = r.metrics;
    m.initial = r.opt.trace.empty() ? LossTerms{} : r.opt.trace.front();
    m.best = r.opt.best;
    m.best_iteration = r.opt.best_iteration;
    m.iterations = r.opt.iterations;
    m.trace = r.opt.trace;
    m.rect = r.rect;
    m.seconds_optimize = std::chrono::duration<double>(t2 - t1).count();
    m.seconds_total = std::chrono::duration<double>(clock::now() - t0).count();
    write_text(paths.manifest, to_json(m).dump(2) + "\n");
    return m;
}

RunManifest replay(const RunManifest& recorded, const std::optional<RunPaths>& redirect) {
    RunPaths paths = recorded.paths;
    if (redirect) {
        paths.output = redirect->output;
        paths.trace = redirect->trace;
        paths.manifest = redirect->manifest;
    }
    const OpenModels models = open_models(recorded.config);
    const std::vector<ModelSpec> now = {models.models.generator->spec(), models.models.perceptual->spec(),
                                        models.models.identity->spec()};
    if (!recorded.model_specs.empty())
        for (std::size_t i = 0; i < now.size() && i < recorded.model_specs.size(); ++i)
            if (to_json(now[i]) != to_json(recorded.model_specs[i]))
                throw PipelineError("model " + to_string(now[i].role) + " no longer matches the recorded spec");
    return run_deidentify(paths, recorded.config, models.models);
}

std::vector<BatchOutcome> run_batch(const std::vector<std::pair<std::string, RunPaths>>& items,
                                    const PipelineConfig& cfg) {
    std::vector<BatchOutcome> out(items.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        std::optional<OpenModels> models;
        for (std::size_t i = next++; i < items.size(); i = next++) {
            out[i].image_id = items[i].first;
            try {
                if (!models) models.emplace(open_models(cfg));
                PipelineConfig c = cfg;
                c.opt.seed = image_seed(cfg.opt.seed, items[i].first);
                out[i].manifest = run_deidentify(items[i].second, c, models->models);
            } catch (const std::exception& e) {
                out[i].error = e.what();
            }
        }
    };
    const std::size_t width = std::clamp<std::size_t>(cfg.jobs, 1, std::max<std::size_t>(items.size(), 1));
    if (width == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < width; ++w) pool.emplace_back(worker);
    }
    return out;
}

std::vector<SweepRow> sweep_lambda(const std::vector<SweepSample>& samples, const std::vector<double>& lambdas,
                                   const PipelineConfig& cfg, const ModelSet& models, const SweepScorer& scorer) {
    if (samples.empty()) throw PipelineError("sweep needs at least one sample");
    if (lambdas.empty()) throw PipelineError("sweep needs at least one lambda_did value");
    std::vector<SweepRow> rows;
    for (double lambda : lambdas) {
        PipelineConfig c = cfg;
        c.loss.lambda_did = lambda;
        SweepRow row;
        row.lambda_did = lambda;
        row.samples = samples.size();
        std::vector<SweepSample> outputs(samples.size());
        std::vector<double> ssims(samples.size()), dists(samples.size());
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex failure_mutex;
        auto worker = [&] {
            for (std::size_t i = next++; i < samples.size(); i = next++) try {
                PipelineConfig ci = c;
                ci.opt.seed = image_seed(cfg.opt.seed, samples[i].id);
                const DeidResult r = deidentify(samples[i].image, samples[i].landmarks, ci, models);
                ssims[i] = r.metrics.ssim;
                dists[i] = pair_score(extract_features(*models.identity, samples[i].image),
                                      extract_features(*models.identity, r.output), Comparator::Distance);
                outputs[i] = {samples[i].id, samples[i].subject_id, r.output, samples[i].landmarks};
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        };
        const std::size_t width = std::clamp<std::size_t>(cfg.jobs, 1, samples.size());
        if (width == 1) {
            worker();
        } else {
            std::vector<std::jthread> pool;
            for (std::size_t w = 0; w < width; ++w) pool.emplace_back(worker);
        }
        if (failure) std::rethrow_exception(failure);
        for (std::size_t i = 0; i < samples.size(); ++i) {
            row.mean_ssim += ssims[i];
            row.mean_identity_distance += dists[i];
        }
        row.mean_ssim /= static_cast<double>(samples.size());
        row.mean_identity_distance /= static_cast<double>(samples.size());
        if (scorer) row.asr = scorer(outputs);
        rows.push_back(row);
    }
    return rows;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
    out << "lambda_did,mean_ssim,identity_feature_distance,asr\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,", r.lambda_did, r.mean_ssim, r.mean_identity_distance);
        out << buf;
        if (r.asr) {
            std::snprintf(buf, sizeof buf, "%.17g", *r.asr);
            out << buf;
        }
        out << "\n";
    }
}

void write_sweep_dat(std::ostream& out, const std::vector<SweepRow>& rows) {
    out << "# lambda_did mean_ssim identity_feature_distance asr\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.10g %.10g %.10g %s\n", r.lambda_did, r.mean_ssim, r.mean_identity_distance,
                      r.asr ? std::to_string(*r.asr).c_str() : "nan");
        out << buf;
    }
}

}  // namespace deid
