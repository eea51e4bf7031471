#pragma once

// Toy-model configurations shared by the module tests and the acceptance run.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deid/config.hpp"
#include "deid/diffmodel.hpp"
#include "deid/facemask.hpp"
#include "deid/latentopt.hpp"

namespace scenario {

struct ToyCase {
    int latent_dim = 8;
    int image_size = 8;   // generator output
    int feature_in = 8;   // extractor input, resampled from the generator output
    int channels = 3;
    int features = 8;
    std::uint64_t seed = 1;
};

// Twenty configurations spanning latent dims 4..32 and generator sizes 8..16.
std::vector<ToyCase> gradient_matrix();

deid::ModelSet toy_models(const ToyCase& c, double perceptual_gain = 8800.0, double identity_gain = 12.0);

struct GradientCheck {
    double relative_error = 0.0;
    std::vector<double> analytic;
    std::vector<double> numeric;
};

// Compares the analytic gradient of the smoothed objective with central
// differences at a seeded random latent and a random target image.
GradientCheck check_gradient(const ToyCase& c, const deid::LossWeights& w, double step = 1e-5);

// Landmark JSON in the {"points": ..., "anchors": ...} layout.
std::string landmarks_json(const deid::LandmarkSet& lm);
void write_landmarks(const std::filesystem::path& path, const deid::LandmarkSet& lm);

// Pipeline config with small toy models (generator `size`x`size`, latent 8,
// hidden 16, extractors on `size`x`size` inputs) and the given iteration count.
deid::PipelineConfig small_pipeline(int size = 8, int iterations = 40);

// Command line that starts the stand-alone toy model server with these arguments.
std::string server_command(const std::string& args);

struct CommandResult {
    int exit_code = -1;
    std::string output;  // stdout
};

// Runs a shell command and captures its standard output.
CommandResult run_command(const std::string& command);

}  // namespace scenario
