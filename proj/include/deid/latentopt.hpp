#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "deid/diffmodel.hpp"
#include "deid/imagecore.hpp"

namespace deid {

struct OptimizationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LossWeights {
    double lambda_per = 1.0 / 8800.0;
    double lambda_did = 1.0 / 12.0;

    void validate() const;
};

enum class InitStrategy { Normal, Zero, Warm };

std::string to_string(InitStrategy s);
InitStrategy parse_init(const std::string& s);

struct OptConfig {
    int iterations = 800;
    double learning_rate = 1.0;
    InitStrategy init = InitStrategy::Normal;
    std::uint64_t seed = 0;
    int warm_iterations = 0;  // perceptual-only steps before the main loop (InitStrategy::Warm)
    bool record_trace = true;

    void validate() const;
};

struct LossTerms {
    double l_per = 0.0;
    double l_did = 0.0;
    double l_final = 0.0;
    friend bool operator==(const LossTerms&, const LossTerms&) = default;
};

struct OptResult {
    LatentVector latent;        // best iterate
    Image image;                // generator output at the best iterate
    LossTerms best;
    int best_iteration = 0;
    int iterations = 0;
    LatentVector initial_latent;
    std::vector<LossTerms> trace;       // losses at z_t before the update t -> t+1
    std::vector<LossTerms> warm_trace;  // perceptual-only warm start, if any
};

// Smoothing used by the gradient: |d|_eps = sqrt(|d|^2 + eps^2).
inline constexpr double kNormSmoothing = 1e-8;

// ||F_P(x) - F_P(x')||_2 for a single pair.
double perceptual_loss(const FeatureVector& f_x, const FeatureVector& f_xp);
// -||F_id(x) - F_id(x')||_2 for a single pair.
double deident_loss(const FeatureVector& f_x, const FeatureVector& f_xp);
double total_loss(double l_per, double l_did, const LossWeights& w);

// Fixed optimization target: the masked input image and its features under
// both extractors. Evaluations are const and thread-safe.
class LossContext {
public:
    LossContext(Image target, ModelSet models, LossWeights weights);

    struct Evaluation {
        LossTerms losses;           // exact norms
        double objective = 0.0;     // smoothed-norm objective the gradient belongs to
        std::vector<double> gradient;
        Image generated;
    };

    Evaluation evaluate(const LatentVector& z, bool with_gradient = true) const;
    double objective(const LatentVector& z) const { return evaluate(z, false).objective; }

    const Image& target() const { return target_; }
    const FeatureVector& target_perceptual() const { return target_per_; }
    const FeatureVector& target_identity() const { return target_id_; }
    const ModelSet& models() const { return models_; }
    const LossWeights& weights() const { return weights_; }

private:
    Image target_;
    ModelSet models_;
    LossWeights weights_;
    FeatureVector target_per_;
    FeatureVector target_id_;
};

// dL_final/dz through generator VJP <- (resize adjoint) <- extractor VJPs.
std::vector<double> loss_gradient(const LatentVector& z, const Image& target_masked_image,
                                  const ModelSet& models, const LossWeights& w);

LatentVector initial_latent(int dim, const OptConfig& cfg);

// Plain fixed-step gradient descent z <- z - lr * grad; returns the iterate with
// the smallest recorded L_final (first one on ties).
OptResult optimize(const Image& target_masked_image, const ModelSet& models, const LossWeights& w,
                   const OptConfig& cfg);

void write_trace_csv(std::ostream& out, const std::vector<LossTerms>& trace);

}  // namespace deid
