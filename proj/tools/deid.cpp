#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "deid/blend.hpp"
#include "deid/config.hpp"
#include "deid/evalharness.hpp"
#include "deid/facemask.hpp"
#include "deid/metrics.hpp"
#include "deid/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Options shared by every command that builds a PipelineConfig.
struct ConfigOptions {
    std::string file;
    std::vector<std::string> sets;
    std::map<std::string, std::string> shortcuts;

    void add_to(CLI::App& cmd) {
        cmd.add_option("--config", file, "Config file (key = value lines, [section] headers)");
        cmd.add_option("--set", sets, "Override a config key, e.g. --set loss.lambda_did=0.17");
    }

    deid::PipelineConfig load() const {
        std::map<std::string, std::string> overrides = shortcuts;
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
            overrides[s.substr(0, eq)] = s.substr(eq + 1);
        }
        std::optional<fs::path> f;
        if (!file.empty()) f = file;
        return deid::load_config(f, overrides);
    }
};

void shortcut(CLI::App& cmd, ConfigOptions& co, const std::string& flag, const std::string& key,
              const std::string& help) {
    cmd.add_option_function<std::string>(flag, [&co, key](const std::string& v) { co.shortcuts[key] = v; }, help);
}

std::string module_of(const std::exception& e) {
    if (dynamic_cast<const deid::MaskError*>(&e)) return "facemask";
    if (dynamic_cast<const deid::ModelError*>(&e)) return "diffmodel";
    if (dynamic_cast<const deid::OptimizationError*>(&e)) return "latentopt";
    if (dynamic_cast<const deid::BlendError*>(&e)) return "blend";
    if (dynamic_cast<const deid::MetricError*>(&e)) return "metrics";
    if (dynamic_cast<const deid::EvalError*>(&e)) return "evalharness";
    if (dynamic_cast<const deid::wire::WireError*>(&e)) return "modelwire";
    if (dynamic_cast<const deid::ConfigError*>(&e)) return "config";
    if (dynamic_cast<const deid::ImageError*>(&e)) return "imagecore";
    if (dynamic_cast<const deid::PipelineError*>(&e)) return "pipeline";
    return "deid";
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(deid::parse_number(item));
    if (out.empty()) throw UsageError("empty value list '" + s + "'");
    return out;
}

void emit(const std::string& text, const std::string& path) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw deid::PipelineError("cannot write " + path);
    out << text;
}

fs::path with_suffix(const fs::path& p, const std::string& suffix) {
    return p.parent_path() / (p.stem().string() + suffix);
}

void print_summary(const deid::RunManifest& m) {
    std::printf("%s: ssim=%.6f psnr=%s best_l_final=%.9g (iteration %d of %d)\n", m.paths.output.string().c_str(),
                m.metrics.ssim, deid::format_psnr(m.metrics.psnr).c_str(), m.best.l_final, m.best_iteration,
                m.iterations);
}

struct DeidentifyCmd {
    ConfigOptions co;
    std::string input, landmarks, output, trace, manifest, replay;
    std::string input_dir, landmark_dir, output_dir;
    bool premasked = false;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("deidentify", "Mask, optimize and merge one image (or a directory)");
        co.add_to(*cmd);
        cmd->add_option("--input,-i", input, "Input image (PNG/PPM/PGM)");
        cmd->add_option("--landmarks,-l", landmarks, "Landmark JSON file");
        cmd->add_flag("--premasked", premasked, "Input already has a black background; no landmarks needed");
        cmd->add_option("--output,-o", output, "Output image");
        cmd->add_option("--trace", trace, "Loss trace CSV (default: <output>.trace.csv)");
        cmd->add_option("--manifest", manifest, "Run manifest JSON (default: <output>.manifest.json)");
        cmd->add_option("--replay", replay, "Re-run a recorded manifest");
        cmd->add_option("--input-dir", input_dir, "Process every image in a directory");
        cmd->add_option("--landmark-dir", landmark_dir, "Landmarks for --input-dir, named <image stem>.json");
        cmd->add_option("--output-dir", output_dir, "Output directory for --input-dir");
        shortcut(*cmd, co, "--iterations", "opt.iterations", "Gradient steps");
        shortcut(*cmd, co, "--lr", "opt.learning_rate", "Learning rate");
        shortcut(*cmd, co, "--lambda-per", "loss.lambda_per", "Perceptual loss weight");
        shortcut(*cmd, co, "--lambda-did", "loss.lambda_did", "De-identification loss weight");
        shortcut(*cmd, co, "--seed", "opt.seed", "Latent initialization seed");
        shortcut(*cmd, co, "--jobs", "run.jobs", "Worker threads for directory runs");
        cmd->callback([this] { run(); });
    }

    void run() {
        if (!replay.empty()) {
            const auto recorded = deid::read_manifest_file(replay);
            std::optional<deid::RunPaths> redirect;
            if (!output.empty()) {
                deid::RunPaths p = recorded.paths;
                p.output = output;
                p.trace = trace.empty() ? with_suffix(p.output, ".trace.csv") : fs::path(trace);
                p.manifest = manifest.empty() ? with_suffix(p.output, ".manifest.json") : fs::path(manifest);
                redirect = p;
            }
            print_summary(deid::replay(recorded, redirect));
            return;
        }
        if (!input_dir.empty()) return run_dir();
        if (input.empty()) throw UsageError("deidentify needs --input, --input-dir or --replay");
        if (output.empty()) throw UsageError("deidentify needs --output");
        if (landmarks.empty() && !premasked) throw UsageError("no landmark file given; pass --landmarks or --premasked");
        if (!landmarks.empty() && premasked) throw UsageError("--landmarks and --premasked are mutually exclusive");
        const auto cfg = co.load();
        deid::RunPaths p;
        p.input = input;
        if (!landmarks.empty()) p.landmarks = landmarks;
        p.output = output;
        p.trace = trace.empty() ? with_suffix(p.output, ".trace.csv") : fs::path(trace);
        p.manifest = manifest.empty() ? with_suffix(p.output, ".manifest.json") : fs::path(manifest);
        const auto models = deid::open_models(cfg);
        print_summary(deid::run_deidentify(p, cfg, models.models));
    }

    void run_dir() {
        if (output_dir.empty()) throw UsageError("--input-dir needs --output-dir");
        if (landmark_dir.empty() && !premasked)
            throw UsageError("no landmark directory given; pass --landmark-dir or --premasked");
        const auto cfg = co.load();
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(input_dir)) {
            const auto ext = e.path().extension().string();
            if (e.is_regular_file() && (ext == ".png" || ext == ".ppm" || ext == ".pgm" || ext == ".pnm"))
                files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        if (files.empty()) throw deid::PipelineError("no images in " + input_dir);
        std::vector<std::pair<std::string, deid::RunPaths>> items;
        for (const auto& f : files) {
            deid::RunPaths p;
            p.input = f;
            if (!premasked) p.landmarks = fs::path(landmark_dir) / (f.stem().string() + ".json");
            p.output = fs::path(output_dir) / (f.stem().string() + ".png");
            p.trace = fs::path(output_dir) / (f.stem().string() + ".trace.csv");
            p.manifest = fs::path(output_dir) / (f.stem().string() + ".manifest.json");
            items.emplace_back(f.filename().string(), p);
        }
        int failures = 0;
        for (const auto& o : deid::run_batch(items, cfg)) {
            if (o.manifest) {
                print_summary(*o.manifest);
            } else {
                std::fprintf(stderr, "error [pipeline]: %s: %s\n", o.image_id.c_str(), o.error.c_str());
                ++failures;
            }
        }
        if (failures) throw deid::PipelineError(std::to_string(failures) + " image(s) failed");
    }
};

struct MetricsCmd {
    std::string a, b, format = "json", out;
    bool windowed = false;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("metrics", "SSIM and PSNR between two images");
        cmd->add_option("image_a", a, "Reference image")->required();
        cmd->add_option("image_b", b, "Compared image")->required();
        cmd->add_option("--format", format, "json or csv")->check(CLI::IsMember({"json", "csv"}));
        cmd->add_flag("--windowed", windowed, "Average SSIM over 11x11 Gaussian windows");
        cmd->add_option("--out", out, "Write the report to a file");
        cmd->callback([this] { run(); });
    }

    void run() {
        const auto r = deid::compare_images(deid::load_image(a), deid::load_image(b), {},
                                            windowed ? deid::SsimMode::Windowed : deid::SsimMode::Global);
        if (format == "json") {
            emit(deid::to_json(r).dump(2) + "\n", out);
        } else {
            char buf[256];
            std::snprintf(buf, sizeof buf, "ssim,psnr,mse\n%.17g,%s,%.17g\n", r.ssim,
                          std::isinf(r.psnr) ? "inf" : deid::format_double(r.psnr).c_str(), r.mse);
            emit(buf, out);
        }
    }
};

struct EvaluateCmd {
    ConfigOptions co;
    std::string train, test, scenario = "identification", fars = "0.001,0.01", comparator = "distance";
    std::string format = "json", out;
    std::size_t impostor_cap = 1000000;
    std::uint64_t seed = 0;
    int epochs = 200;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("evaluate", "Attack success rate of protected images");
        co.add_to(*cmd);
        cmd->add_option("--train", train, "Manifest of original images (subject_id,image_path)")->required();
        cmd->add_option("--test", test, "Manifest of protected images")->required();
        cmd->add_option("--scenario", scenario, "identification or verification")
            ->check(CLI::IsMember({"identification", "verification"}));
        cmd->add_option("--far", fars, "Comma-separated false acceptance rates (verification)");
        cmd->add_option("--comparator", comparator, "distance or similarity")
            ->check(CLI::IsMember({"distance", "similarity"}));
        cmd->add_option("--impostor-cap", impostor_cap, "Maximum number of impostor pairs");
        cmd->add_option("--seed", seed, "Seed for impostor sampling and classifier training");
        cmd->add_option("--epochs", epochs, "Classifier training epochs");
        cmd->add_option("--format", format, "json or csv")->check(CLI::IsMember({"json", "csv"}));
        cmd->add_option("--out", out, "Write the report to a file");
        cmd->callback([this] { run(); });
    }

    void run() {
        const auto cfg = co.load();
        const auto models = deid::open_models(cfg);
        const deid::Extractor& ex = *models.models.identity;
        auto load = [&](const std::string& path) {
            auto res = deid::extract_dataset(deid::read_manifest(path), ex, cfg.jobs);
            for (const auto& f : res.failures)
                std::fprintf(stderr, "warning [evalharness]: skipped %s: %s\n", f.image_id.c_str(), f.reason.c_str());
            return res;
        };
        const auto originals = load(train);
        const auto protected_set = load(test);

        json report;
        report["scenario"] = scenario;
        report["extractor"] = deid::to_json(ex.spec());
        report["train_images"] = originals.dataset.entries.size();
        report["test_images"] = protected_set.dataset.entries.size();
        report["skipped"] = originals.failures.size() + protected_set.failures.size();
        std::ostringstream csv;

        if (scenario == "identification") {
            deid::IdentifierConfig ic;
            ic.seed = seed;
            ic.epochs = epochs;
            const auto model = deid::train_identifier(originals.dataset, ic);
            const auto r = deid::identification_asr(model, protected_set.dataset);
            report["training_accuracy"] = deid::training_accuracy(model, originals.dataset);
            report["identification"] = deid::to_json(r);
            csv << "scenario,asr,test_images\nidentification," << deid::format_double(r.asr) << ","
                << r.outcomes.size() << "\n";
        } else {
            const auto cmp = deid::parse_comparator(comparator);
            const auto impostors = deid::impostor_scores(originals.dataset, cmp, impostor_cap, seed);
            const auto pairs = deid::make_genuine_pairs(originals.dataset, protected_set.dataset);
            json per_far = json::array();
            csv << "scenario,far,tau,asr,genuine_pairs,impostor_pairs\n";
            for (double far : parse_list(fars)) {
                const auto cal = deid::calibrate_threshold(impostors, far, cmp);
                if (cal.insufficient)
                    std::fprintf(stderr,
                                 "warning [evalharness]: %zu impostor pairs are too few for FAR %g; "
                                 "tau is placed beyond the extreme score\n",
                                 cal.impostors, far);
                const auto r = deid::verification_asr(pairs, cal, cmp);
                per_far.push_back(deid::to_json(r));
                csv << "verification," << deid::format_double(far) << "," << deid::format_double(cal.tau) << ","
                    << deid::format_double(r.asr) << "," << pairs.size() << "," << cal.impostors << "\n";
            }
            report["comparator"] = comparator;
            report["verification"] = per_far;
        }
        emit(format == "json" ? report.dump(2) + "\n" : csv.str(), out);
    }
};

struct SweepCmd {
    ConfigOptions co;
    std::string samples, lambdas, out, dat, eval_train;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("sweep-lambda", "Quality and identity distance across lambda_did values");
        co.add_to(*cmd);
        cmd->add_option("--samples", samples, "Manifest of images (subject_id,image_path,landmark_path)")->required();
        cmd->add_option("--lambdas", lambdas, "Comma-separated lambda_did values (fractions allowed)")->required();
        cmd->add_option("--out", out, "CSV output (default: stdout)");
        cmd->add_option("--dat", dat, "Plot-ready whitespace-separated data file");
        cmd->add_option("--eval-train", eval_train, "Manifest of originals; adds an identification ASR column");
        cmd->callback([this] { run(); });
    }

    void run() {
        const auto cfg = co.load();
        const auto models = deid::open_models(cfg);
        std::vector<deid::SweepSample> set;
        for (const auto& e : deid::read_manifest(samples)) {
            deid::SweepSample s;
            s.id = e.image_id;
            s.subject_id = e.subject_id;
            s.image = deid::load_image(e.image_path);
            if (e.landmark_path)
                s.landmarks = deid::load_landmarks(*e.landmark_path, deid::Dims{s.image.height(), s.image.width()});
            set.push_back(std::move(s));
        }
        deid::SweepScorer scorer;
        std::optional<deid::LinearIdentifier> identifier;
        if (!eval_train.empty()) {
            const auto train_set = deid::extract_dataset(deid::read_manifest(eval_train), *models.models.identity, cfg.jobs);
            identifier = deid::train_identifier(train_set.dataset);
            scorer = [&](const std::vector<deid::SweepSample>& outputs) {
                deid::FeatureDataset ds;
                for (const auto& o : outputs)
                    ds.entries.push_back({o.subject_id, o.id, deid::extract_features(*models.models.identity, o.image)});
                return deid::identification_asr(*identifier, ds).asr;
            };
        }
        const auto rows = deid::sweep_lambda(set, parse_list(lambdas), cfg, models.models, scorer);
        std::ostringstream csv;
        deid::write_sweep_csv(csv, rows);
        emit(csv.str(), out);
        if (!dat.empty()) {
            std::ostringstream d;
            deid::write_sweep_dat(d, rows);
            emit(d.str(), dat);
        }
    }
};

struct MaskCmd {
    std::string input, landmarks, output, mask_output, crop_output;
    double margin = 0.3;
    int feather = 0;
    int align = 0;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("mask", "Face rectangle, black-background image and blend mask");
        cmd->add_option("--input,-i", input, "Input image")->required();
        cmd->add_option("--landmarks,-l", landmarks, "Landmark JSON file")->required();
        cmd->add_option("--output,-o", output, "Masked image")->required();
        cmd->add_option("--mask-output", mask_output, "Blend mask as a grayscale image");
        cmd->add_option("--crop-output", crop_output, "Face rectangle crop");
        cmd->add_option("--margin", margin, "Rectangle growth per side, as a fraction of the landmark box");
        cmd->add_option("--feather", feather, "Linear ramp width inside the rectangle border");
        cmd->add_option("--align", align, "Also write an aligned face of this size to <output>.aligned.png");
        cmd->callback([this] { run(); });
    }

    void run() {
        const auto img = deid::load_image(input);
        const deid::Dims dims{img.height(), img.width()};
        const auto lm = deid::load_landmarks(landmarks, dims);
        const auto rect = deid::face_rect(lm, margin, dims);
        deid::save_image(deid::apply_face_mask(img, rect), output);
        if (!mask_output.empty()) deid::save_image(deid::build_blend_mask(rect, dims, feather).as_image(), mask_output);
        if (!crop_output.empty()) deid::save_image(deid::crop_image(img, rect), crop_output);
        if (align > 0) {
            const auto a = deid::align_face(img, lm, deid::AlignTemplate::canonical(align));
            deid::save_image(a.image, with_suffix(output, ".aligned.png"));
        }
        std::printf("face_rect x0=%d y0=%d x1=%d y1=%d\n", rect.x0, rect.y0, rect.x1, rect.y1);
    }
};

struct MergeCmd {
    std::string a, b, mask, landmarks, output, mode = "complete", role = "generated";
    int levels = 10, feather = 0;
    double margin = 0.3;
    bool no_match = false;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("merge", "Multi-band merge of an input and a generated image");
        cmd->add_option("--input,-a", a, "Original image A")->required();
        cmd->add_option("--generated,-b", b, "Generated image B")->required();
        cmd->add_option("--mask", mask, "Grayscale mask image");
        cmd->add_option("--landmarks,-l", landmarks, "Build the mask from landmarks instead");
        cmd->add_option("--output,-o", output, "Merged image")->required();
        cmd->add_option("--levels", levels, "Number of Gaussian levels");
        cmd->add_option("--mode", mode, "complete or literal")->check(CLI::IsMember({"complete", "literal"}));
        cmd->add_option("--mask-role", role, "Image selected by mask value 1: generated or input")
            ->check(CLI::IsMember({"generated", "input"}));
        cmd->add_option("--margin", margin, "Rectangle margin when using --landmarks");
        cmd->add_option("--feather", feather, "Mask feather when using --landmarks");
        cmd->add_flag("--no-match", no_match, "Skip histogram matching to A");
        cmd->callback([this] { run(); });
    }

    void run() {
        if (mask.empty() == landmarks.empty()) throw UsageError("merge needs exactly one of --mask or --landmarks");
        const auto ia = deid::load_image(a);
        const auto ib = deid::load_image(b);
        const deid::Dims dims{ia.height(), ia.width()};
        deid::BlendMask m;
        if (!mask.empty()) {
            const auto mi = deid::load_image(mask);
            if (mi.channels() != 1) throw UsageError("mask image must be grayscale");
            m = {mi.height(), mi.width(), mi.values()};
        } else {
            m = deid::build_blend_mask(deid::face_rect(deid::load_landmarks(landmarks, dims), margin, dims), dims,
                                       feather);
        }
        const auto bank = deid::FilterBank::standard(levels);
        deid::Image merged = mode == "complete"
                                 ? deid::merge_complete(ia, ib, m, bank, deid::parse_mask_role(role))
                                 : deid::merge_literal(ia, ib, m, bank);
        if (!no_match) merged = deid::histogram_match(merged, ia);
        deid::save_image(deid::clamp01(std::move(merged)), output);
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mask-guided face de-identification"};
    app.set_version_flag("--version", std::string(deid::kToolVersion));
    app.require_subcommand(1);
    DeidentifyCmd deidentify;
    MetricsCmd metrics;
    EvaluateCmd evaluate;
    SweepCmd sweep;
    MaskCmd mask;
    MergeCmd merge;
    deidentify.add(app);
    metrics.add(app);
    evaluate.add(app);
    sweep.add(app);
    mask.add(app);
    merge.add(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error [%s]: %s\n", module_of(e).c_str(), e.what());
        return 1;
    }
    return 0;
}
