#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "deid/blend.hpp"
#include "deid/diffmodel.hpp"
#include "deid/latentopt.hpp"

namespace deid {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class SourceKind { Toy, Stdio, Tcp };

std::string to_string(SourceKind k);
SourceKind parse_source_kind(const std::string& s);

// Where one of the three models comes from. Toy sources are built in process
// from the dims below; stdio and tcp sources report their own spec at handshake.
struct ModelSource {
    SourceKind kind = SourceKind::Toy;
    std::string command;             // stdio
    std::string host = "127.0.0.1";  // tcp
    int port = 0;                    // tcp
    std::uint64_t seed = 0;
    int hidden = 32;
    double gain = 1.0;               // extractors
    int latent_dim = 16;             // generator
    int height = 16;
    int width = 16;
    int channels = 3;
    int features = 16;               // extractors

    ModelSpec toy_spec(ModelRole role) const;
};

enum class BlendMode { Complete, Literal };

std::string to_string(BlendMode m);
BlendMode parse_blend_mode(const std::string& s);

struct PipelineConfig {
    LossWeights loss;
    OptConfig opt;

    double mask_margin = 0.3;
    int mask_feather = 0;
    bool align = false;
    int align_size = 0;  // 0: use the generator height

    int blend_levels = 10;
    MaskRole mask_role = MaskRole::SelectsGenerated;
    BlendMode blend_mode = BlendMode::Complete;
    bool histogram_match = true;

    ModelSource generator;
    ModelSource perceptual;
    ModelSource identity;

    int jobs = 1;
    double timeout_seconds = 10.0;

    PipelineConfig();

    // Sets one dotted key ("loss.lambda_did", "model.identity.gain", ...).
    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    // Every key with its current value; doubles are printed round-trip exact.
    std::map<std::string, std::string> snapshot() const;
    void validate() const;

    static const std::vector<std::string>& keys();
};

// Parses `key = value` lines with optional `[section]` headers (which prefix
// the following keys with "section.") and `#` comments. Values may be quoted;
// numbers may be written as fractions such as 1/12.
std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

// Looks up DEID_<KEY> for every known key, with dots mapped to underscores and
// letters upper-cased (model.identity.gain -> DEID_MODEL_IDENTITY_GAIN).
std::map<std::string, std::string> env_overrides(
    const std::function<const char*(const char*)>& getenv_fn = [](const char* n) { return std::getenv(n); });

std::string env_name(const std::string& key);

// defaults < file < environment < explicit overrides.
PipelineConfig load_config(const std::optional<std::filesystem::path>& file,
                           const std::map<std::string, std::string>& cli_overrides = {},
                           const std::function<const char*(const char*)>& getenv_fn =
                               [](const char* n) { return std::getenv(n); });

nlohmann::json to_json(const PipelineConfig& cfg);
PipelineConfig config_from_json(const nlohmann::json& j);

double parse_number(const std::string& s);
std::string format_double(double v);

}  // namespace deid
