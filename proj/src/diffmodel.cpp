#include "deid/diffmodel.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace deid {

using nlohmann::json;

std::string to_string(ModelRole role) {
    switch (role) {
        case ModelRole::Generator: return "generator";
        case ModelRole::Perceptual: return "perceptual";
        case ModelRole::Identity: return "identity";
    }
    return "unknown";
}

ModelRole parse_role(const std::string& s) {
    if (s == "generator") return ModelRole::Generator;
    if (s == "perceptual") return ModelRole::Perceptual;
    if (s == "identity") return ModelRole::Identity;
    throw ModelError("unknown model role '" + s + "'");
}

namespace {

std::size_t product(const std::vector<int>& dims) {
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    return n;
}

std::string dims_string(const std::vector<int>& dims) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
    os << "]";
    return os.str();
}

bool positive(const std::vector<int>& dims) {
    for (int d : dims)
        if (d <= 0) return false;
    return !dims.empty();
}

}  // namespace

std::size_t ModelSpec::input_size() const { return product(input_shape); }
std::size_t ModelSpec::output_size() const { return product(output_shape); }

void ModelSpec::validate() const {
    if (!positive(input_shape) || !positive(output_shape))
        throw ModelError("model shapes must be nonempty and positive");
    const auto image_shape_ok = [](const std::vector<int>& s) {
        return s.size() == 3 && (s[2] == 1 || s[2] == 3);
    };
    if (role == ModelRole::Generator) {
        if (input_shape.size() != 1 || input_shape[0] != latent_dim)
            throw ModelError("generator input shape " + dims_string(input_shape) +
                             " does not match latent dim " + std::to_string(latent_dim));
        if (!image_shape_ok(output_shape))
            throw ModelError("generator output must be HxWxC with C in {1,3}, got " +
                             dims_string(output_shape));
    } else {
        if (!image_shape_ok(input_shape))
            throw ModelError("extractor input must be HxWxC with C in {1,3}, got " +
                             dims_string(input_shape));
        if (output_shape.size() != 1)
            throw ModelError("extractor output must be a vector, got " + dims_string(output_shape));
    }
    if (hidden <= 0) throw ModelError("hidden width must be positive");
    if (!std::isfinite(output_gain) || output_gain <= 0) throw ModelError("output gain must be positive");
}

ModelSpec ModelSpec::generator(int latent_dim, int height, int width, int channels, std::uint64_t seed,
                               int hidden) {
    ModelSpec s;
    s.role = ModelRole::Generator;
    s.input_shape = {latent_dim};
    s.output_shape = {height, width, channels};
    s.latent_dim = latent_dim;
    s.seed = seed;
    s.hidden = hidden;
    return s;
}

ModelSpec ModelSpec::extractor(ModelRole role, int height, int width, int channels, int features,
                               std::uint64_t seed, int hidden, double gain) {
    ModelSpec s;
    s.role = role;
    s.input_shape = {height, width, channels};
    s.output_shape = {features};
    s.seed = seed;
    s.hidden = hidden;
    s.output_gain = gain;
    return s;
}

json to_json(const ModelSpec& spec) {
    json j;
    j["role"] = to_string(spec.role);
    j["input_shape"] = spec.input_shape;
    j["output_shape"] = spec.output_shape;
    if (spec.role == ModelRole::Generator) j["latent_dim"] = spec.latent_dim;
    if (spec.seed) j["seed"] = *spec.seed;
    j["hidden"] = spec.hidden;
    j["output_gain"] = spec.output_gain;
    return j;
}

ModelSpec model_spec_from_json(const json& j) {
    try {
        ModelSpec s;
        s.role = parse_role(j.at("role").get<std::string>());
        s.input_shape = j.at("input_shape").get<std::vector<int>>();
        s.output_shape = j.at("output_shape").get<std::vector<int>>();
        s.latent_dim = j.value("latent_dim", 0);
        if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
        s.hidden = j.value("hidden", 32);
        s.output_gain = j.value("output_gain", 1.0);
        s.validate();
        return s;
    } catch (const json::exception& e) {
        throw ModelError(std::string("malformed model spec: ") + e.what());
    }
}

double Lcg::normal() {
    const double u1 = 1.0 - static_cast<double>(uniform());
    const double u2 = static_cast<double>(uniform());
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

TwoLayerWeights TwoLayerWeights::draw(int inputs, int hidden, int outputs, std::uint64_t seed) {
    TwoLayerWeights w;
    w.inputs = inputs, w.hidden = hidden, w.outputs = outputs;
    Lcg rng(seed);
    // uniform(-a, a) with a = sqrt(3 / fan_in) gives unit pre-activation variance
    const float s1 = static_cast<float>(std::sqrt(3.0 / inputs));
    const float s2 = static_cast<float>(std::sqrt(3.0 / hidden));
    w.w1.resize(static_cast<std::size_t>(hidden) * inputs);
    w.b1.resize(hidden);
    w.w2.resize(static_cast<std::size_t>(outputs) * hidden);
    w.b2.resize(outputs);
    for (float& v : w.w1) v = rng.symmetric(s1);
    for (float& v : w.b1) v = rng.symmetric(0.5f);
    for (float& v : w.w2) v = rng.symmetric(s2);
    for (float& v : w.b2) v = rng.symmetric(0.5f);
    return w;
}

namespace {

// Hidden activations tanh(W1 x + b1).
std::vector<double> hidden_layer(const TwoLayerWeights& w, std::span<const double> x) {
    std::vector<double> h(w.hidden);
    for (int j = 0; j < w.hidden; ++j) {
        const float* row = &w.w1[static_cast<std::size_t>(j) * w.inputs];
        double acc = w.b1[j];
        for (int i = 0; i < w.inputs; ++i) acc += static_cast<double>(row[i]) * x[i];
        h[j] = std::tanh(acc);
    }
    return h;
}

std::vector<double> output_layer(const TwoLayerWeights& w, const std::vector<double>& h) {
    std::vector<double> out(w.outputs);
    for (int k = 0; k < w.outputs; ++k) {
        const float* row = &w.w2[static_cast<std::size_t>(k) * w.hidden];
        double acc = w.b2[k];
        for (int j = 0; j < w.hidden; ++j) acc += static_cast<double>(row[j]) * h[j];
        out[k] = acc;
    }
    return out;
}

// Back-propagates a gradient on the output pre-activations to the inputs.
std::vector<double> backprop(const TwoLayerWeights& w, const std::vector<double>& h,
                             const std::vector<double>& g_out) {
    std::vector<double> g_hidden(w.hidden, 0.0);
    for (int k = 0; k < w.outputs; ++k) {
        const double g = g_out[k];
        if (g == 0.0) continue;
        const float* row = &w.w2[static_cast<std::size_t>(k) * w.hidden];
        for (int j = 0; j < w.hidden; ++j) g_hidden[j] += static_cast<double>(row[j]) * g;
    }
    for (int j = 0; j < w.hidden; ++j) g_hidden[j] *= 1.0 - h[j] * h[j];
    std::vector<double> g_in(w.inputs, 0.0);
    for (int j = 0; j < w.hidden; ++j) {
        const double g = g_hidden[j];
        const float* row = &w.w1[static_cast<std::size_t>(j) * w.inputs];
        for (int i = 0; i < w.inputs; ++i) g_in[i] += static_cast<double>(row[i]) * g;
    }
    return g_in;
}

double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

}  // namespace

ToyGenerator::ToyGenerator(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    if (spec_.role != ModelRole::Generator) throw ModelError("ToyGenerator needs a generator spec");
    if (!spec_.seed) throw ModelError("toy models need a seed");
    w_ = TwoLayerWeights::draw(spec_.latent_dim, spec_.hidden, static_cast<int>(spec_.output_size()),
                               *spec_.seed);
}

void ToyGenerator::check_latent(const LatentVector& z) const {
    if (static_cast<int>(z.size()) != spec_.latent_dim)
        throw ModelError("latent dimension mismatch: expected " + std::to_string(spec_.latent_dim) +
                         ", got " + std::to_string(z.size()));
}

Image ToyGenerator::forward(const LatentVector& z) const {
    check_latent(z);
    const auto out = output_layer(w_, hidden_layer(w_, z.values));
    Image img(out_height(), out_width(), out_channels());
    for (std::size_t i = 0; i < out.size(); ++i) img.values()[i] = sigmoid(out[i]);
    return img;
}

std::vector<double> ToyGenerator::vjp(const LatentVector& z, const Image& cotangent) const {
    check_latent(z);
    if (cotangent.height() != out_height() || cotangent.width() != out_width() ||
        cotangent.channels() != out_channels())
        throw ModelError("generator cotangent shape " + shape_string(cotangent) + " does not match output");
    const auto h = hidden_layer(w_, z.values);
    const auto pre = output_layer(w_, h);
    std::vector<double> g(pre.size());
    for (std::size_t k = 0; k < pre.size(); ++k) {
        const double s = sigmoid(pre[k]);
        g[k] = cotangent.values()[k] * s * (1.0 - s);
    }
    return backprop(w_, h, g);
}

ToyExtractor::ToyExtractor(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    if (spec_.role == ModelRole::Generator) throw ModelError("ToyExtractor needs an extractor spec");
    if (!spec_.seed) throw ModelError("toy models need a seed");
    w_ = TwoLayerWeights::draw(static_cast<int>(spec_.input_size()), spec_.hidden,
                               static_cast<int>(spec_.output_size()), *spec_.seed);
}

void ToyExtractor::check_input(const Image& img) const {
    if (img.height() != in_height() || img.width() != in_width() || img.channels() != in_channels())
        throw ModelError("extractor input shape " + shape_string(img) + " does not match " +
                         dims_string(spec_.input_shape));
}

FeatureVector ToyExtractor::forward(const Image& img) const {
    check_input(img);
    FeatureVector f;
    f.role = feature_role();
    f.values = output_layer(w_, hidden_layer(w_, img.data()));
    for (double& v : f.values) v *= spec_.output_gain;
    return f;
}

Image ToyExtractor::vjp(const Image& img, std::span<const double> cotangent) const {
    check_input(img);
    if (cotangent.size() != feature_size())
        throw ModelError("extractor cotangent length " + std::to_string(cotangent.size()) +
                         " does not match feature size " + std::to_string(feature_size()));
    const auto h = hidden_layer(w_, img.data());
    std::vector<double> g(cotangent.begin(), cotangent.end());
    for (double& v : g) v *= spec_.output_gain;
    return Image(in_height(), in_width(), in_channels(), backprop(w_, h, g));
}

std::shared_ptr<const Generator> make_toy_generator(const ModelSpec& spec) {
    return std::make_shared<const ToyGenerator>(spec);
}

std::shared_ptr<const Extractor> make_toy_extractor(const ModelSpec& spec) {
    return std::make_shared<const ToyExtractor>(spec);
}

ModelHandle make_toy_model(const ModelSpec& spec) {
    if (spec.role == ModelRole::Generator) return make_toy_generator(spec);
    return make_toy_extractor(spec);
}

FeatureVector extract_features(const Extractor& ex, const Image& img) {
    if (img.channels() != ex.in_channels())
        throw ModelError("extractor expects " + std::to_string(ex.in_channels()) + " channels, got " +
                         std::to_string(img.channels()));
    return ex.forward(resize_bilinear(img, ex.in_height(), ex.in_width()));
}

}  // namespace deid
