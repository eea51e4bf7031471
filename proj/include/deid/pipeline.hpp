#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deid/config.hpp"
#include "deid/facemask.hpp"
#include "deid/latentopt.hpp"
#include "deid/metrics.hpp"
#include "deid/modelwire.hpp"

namespace deid {

inline constexpr const char* kToolVersion = "0.1.0";

struct PipelineError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Models for one worker. Remote sources get their own connection, which is
// shut down when this object is destroyed.
struct OpenModels {
    ModelSet models;
    std::vector<std::shared_ptr<wire::WireClient>> clients;

    OpenModels() = default;
    OpenModels(OpenModels&&) = default;
    OpenModels& operator=(OpenModels&&) = default;
    ~OpenModels();
};

OpenModels open_models(const PipelineConfig& cfg);

// Bounding box of the pixels with any nonzero channel, for images that arrive
// already masked.
FaceRect premasked_rect(const Image& img);

struct DeidResult {
    Image output;       // merged, histogram-matched result at input resolution
    Image masked;       // input with the background zeroed
    Image generated;    // generator output at the best iterate, mapped to input resolution
    FaceRect rect;
    BlendMask mask;
    OptResult opt;
    MetricReport metrics;  // output vs input
    std::optional<SimilarityTransform> alignment;
};

// mask -> optimize -> merge. Without landmarks the image is taken as premasked.
DeidResult deidentify(const Image& image, const std::optional<LandmarkSet>& landmarks, const PipelineConfig& cfg,
                      const ModelSet& models);

// Seed used for one image of a batch: a hash of the image id mixed into the base seed.
std::uint64_t image_seed(std::uint64_t base, const std::string& image_id);

struct RunPaths {
    std::filesystem::path input;
    std::optional<std::filesystem::path> landmarks;  // empty: premasked input
    std::filesystem::path output;
    std::filesystem::path trace;
    std::filesystem::path manifest;
};

struct RunManifest {
    std::string tool_version = kToolVersion;
    RunPaths paths;
    PipelineConfig config;
    std::vector<ModelSpec> model_specs;  // generator, perceptual, identity
    MetricReport metrics;
    LossTerms initial;
    LossTerms best;
    int best_iteration = 0;
    int iterations = 0;
    std::vector<LossTerms> trace;
    FaceRect rect;
    double seconds_total = 0.0;
    double seconds_optimize = 0.0;
};

nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
RunManifest read_manifest_file(const std::filesystem::path& path);

// Loads the inputs, runs the pipeline and writes the output image, loss trace
// CSV and manifest JSON.
RunManifest run_deidentify(const RunPaths& paths, const PipelineConfig& cfg, const ModelSet& models);

// Re-runs a manifest with its recorded inputs, config and outputs paths
// (optionally redirected).
RunManifest replay(const RunManifest& recorded, const std::optional<RunPaths>& redirect = {});

struct BatchOutcome {
    std::string image_id;
    std::optional<RunManifest> manifest;
    std::string error;
};

// Runs a list of images on `cfg.jobs` workers; each worker opens its own models.
// Image i uses opt.seed = image_seed(cfg.opt.seed, ids[i]).
std::vector<BatchOutcome> run_batch(const std::vector<std::pair<std::string, RunPaths>>& items,
                                    const PipelineConfig& cfg);

struct SweepSample {
    std::string id;
    std::string subject_id;
    Image image;
    std::optional<LandmarkSet> landmarks;
};

struct SweepRow {
    double lambda_did = 0.0;
    double mean_ssim = 0.0;
    double mean_identity_distance = 0.0;
    std::optional<double> asr;
    std::size_t samples = 0;
};

// Optional scorer for the outputs of one sweep point.
using SweepScorer = std::function<double(const std::vector<SweepSample>& protected_outputs)>;

// Runs the pipeline for each lambda_did over all samples. SSIM and identity
// distance compare each output to its original.
std::vector<SweepRow> sweep_lambda(const std::vector<SweepSample>& samples, const std::vector<double>& lambdas,
                                   const PipelineConfig& cfg, const ModelSet& models,
                                   const SweepScorer& scorer = {});

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);
// Whitespace-separated columns with a commented header, for plotting tools.
void write_sweep_dat(std::ostream& out, const std::vector<SweepRow>& rows);

}  // namespace deid
