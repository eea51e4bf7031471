#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "deid/imagecore.hpp"

namespace deid {

struct ModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class ModelRole { Generator, Perceptual, Identity };

std::string to_string(ModelRole role);
ModelRole parse_role(const std::string& s);

struct ModelSpec {
    ModelRole role = ModelRole::Generator;
    std::vector<int> input_shape;   // generator: {latent_dim}; extractor: {H, W, C}
    std::vector<int> output_shape;  // generator: {H, W, C}; extractor: {features}
    int latent_dim = 0;             // generators only
    std::optional<std::uint64_t> seed;  // toy models only
    int hidden = 32;                // toy models only
    double output_gain = 1.0;       // toy extractors: scale applied to the output layer

    std::size_t input_size() const;
    std::size_t output_size() const;
    void validate() const;

    static ModelSpec generator(int latent_dim, int height, int width, int channels,
                               std::uint64_t seed, int hidden = 32);
    static ModelSpec extractor(ModelRole role, int height, int width, int channels, int features,
                               std::uint64_t seed, int hidden = 32, double gain = 1.0);
};

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

struct LatentVector {
    std::vector<double> values;
    std::size_t size() const { return values.size(); }
};

enum class FeatureRole { Perceptual, Identity };

struct FeatureVector {
    std::vector<double> values;
    FeatureRole role = FeatureRole::Identity;
    std::size_t size() const { return values.size(); }
};

// A differentiable map from latent space to images. Implementations must be
// safe to call concurrently; forward and vjp never mutate observable state.
class Generator {
public:
    virtual ~Generator() = default;
    virtual const ModelSpec& spec() const = 0;
    virtual Image forward(const LatentVector& z) const = 0;
    // J^T * cotangent, J = d image / d z evaluated at z.
    virtual std::vector<double> vjp(const LatentVector& z, const Image& cotangent) const = 0;

    int latent_dim() const { return spec().latent_dim; }
    int out_height() const { return spec().output_shape.at(0); }
    int out_width() const { return spec().output_shape.at(1); }
    int out_channels() const { return spec().output_shape.at(2); }
};

class Extractor {
public:
    virtual ~Extractor() = default;
    virtual const ModelSpec& spec() const = 0;
    virtual FeatureVector forward(const Image& img) const = 0;
    virtual Image vjp(const Image& img, std::span<const double> cotangent) const = 0;

    FeatureRole feature_role() const {
        return spec().role == ModelRole::Perceptual ? FeatureRole::Perceptual : FeatureRole::Identity;
    }
    int in_height() const { return spec().input_shape.at(0); }
    int in_width() const { return spec().input_shape.at(1); }
    int in_channels() const { return spec().input_shape.at(2); }
    std::size_t feature_size() const { return spec().output_size(); }
};

// 64-bit linear congruential sequence (MMIX constants):
//   state <- state * 6364136223846793005 + 1442695040888963407 (mod 2^64)
// starting from state = seed. uniform() takes the top 24 bits of the new state
// as an exact f32 in [0,1); toy weights are float((2u - 1)) * float(scale).
class Lcg {
public:
    explicit Lcg(std::uint64_t seed) : state_(seed) {}
    std::uint64_t next() {
        state_ = state_ * 6364136223846793005ULL + 1442695040888963407ULL;
        return state_;
    }
    float uniform() { return static_cast<float>(next() >> 40) * 0x1p-24f; }
    float symmetric(float scale) { return (2.0f * uniform() - 1.0f) * scale; }
    // Box-Muller on two uniforms; the first uniform is mapped into (0,1].
    double normal();
    std::uint64_t below(std::uint64_t bound) { return bound ? (next() >> 11) % bound : 0; }

private:
    std::uint64_t state_;
};

// Dense two-layer network: out = act(W2 tanh(W1 x + b1) + b2).
struct TwoLayerWeights {
    int inputs = 0, hidden = 0, outputs = 0;
    std::vector<float> w1, b1, w2, b2;  // row-major: w1 is hidden x inputs, w2 is outputs x hidden

    static TwoLayerWeights draw(int inputs, int hidden, int outputs, std::uint64_t seed);
};

class ToyGenerator final : public Generator {
public:
    explicit ToyGenerator(ModelSpec spec);
    const ModelSpec& spec() const override { return spec_; }
    Image forward(const LatentVector& z) const override;
    std::vector<double> vjp(const LatentVector& z, const Image& cotangent) const override;
    const TwoLayerWeights& weights() const { return w_; }

private:
    void check_latent(const LatentVector& z) const;
    ModelSpec spec_;
    TwoLayerWeights w_;
};

class ToyExtractor final : public Extractor {
public:
    explicit ToyExtractor(ModelSpec spec);
    const ModelSpec& spec() const override { return spec_; }
    FeatureVector forward(const Image& img) const override;
    Image vjp(const Image& img, std::span<const double> cotangent) const override;
    const TwoLayerWeights& weights() const { return w_; }

private:
    void check_input(const Image& img) const;
    ModelSpec spec_;
    TwoLayerWeights w_;
};

using ModelHandle = std::variant<std::shared_ptr<const Generator>, std::shared_ptr<const Extractor>>;

ModelHandle make_toy_model(const ModelSpec& spec);
std::shared_ptr<const Generator> make_toy_generator(const ModelSpec& spec);
std::shared_ptr<const Extractor> make_toy_extractor(const ModelSpec& spec);

// The three models one optimization run needs.
struct ModelSet {
    std::shared_ptr<const Generator> generator;
    std::shared_ptr<const Extractor> perceptual;
    std::shared_ptr<const Extractor> identity;
};

// Runs an extractor on an image of any size by bilinear resampling to its input shape.
FeatureVector extract_features(const Extractor& ex, const Image& img);

}  // namespace deid
