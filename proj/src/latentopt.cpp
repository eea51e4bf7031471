#include "deid/latentopt.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

namespace deid {

void LossWeights::validate() const {
    if (!(lambda_per >= 0) || !(lambda_did >= 0) || !std::isfinite(lambda_per) || !std::isfinite(lambda_did))
        throw OptimizationError("loss weights must be finite and non-negative");
    if (lambda_per == 0 && lambda_did == 0) throw OptimizationError("loss weights must not both be zero");
}

std::string to_string(InitStrategy s) {
    switch (s) {
        case InitStrategy::Normal: return "normal";
        case InitStrategy::Zero: return "zero";
        case InitStrategy::Warm: return "warm";
    }
    return "normal";
}

InitStrategy parse_init(const std::string& s) {
    if (s == "normal") return InitStrategy::Normal;
    if (s == "zero") return InitStrategy::Zero;
    if (s == "warm") return InitStrategy::Warm;
    throw OptimizationError("unknown init strategy '" + s + "'");
}

void OptConfig::validate() const {
    if (iterations < 1) throw OptimizationError("iterations must be at least 1");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate))
        throw OptimizationError("learning rate must be positive");
    if (warm_iterations < 0) throw OptimizationError("warm iterations must be non-negative");
}

namespace {

std::vector<double> difference(const FeatureVector& a, const FeatureVector& b) {
    if (a.size() != b.size())
        throw OptimizationError("feature length mismatch: " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.values[i] - b.values[i];
    return d;
}

double norm_squared(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
}

void require_role(const FeatureVector& f, FeatureRole role, const char* what) {
    if (f.role != role) throw OptimizationError(std::string(what) + ": wrong feature role");
}

}  // namespace

double perceptual_loss(const FeatureVector& f_x, const FeatureVector& f_xp) {
    require_role(f_x, FeatureRole::Perceptual, "perceptual_loss");
    require_role(f_xp, FeatureRole::Perceptual, "perceptual_loss");
    return std::sqrt(norm_squared(difference(f_x, f_xp)));
}

double deident_loss(const FeatureVector& f_x, const FeatureVector& f_xp) {
    require_role(f_x, FeatureRole::Identity, "deident_loss");
    require_role(f_xp, FeatureRole::Identity, "deident_loss");
    return -std::sqrt(norm_squared(difference(f_x, f_xp)));
}

double total_loss(double l_per, double l_did, const LossWeights& w) {
    return w.lambda_per * l_per + w.lambda_did * l_did;
}

LossContext::LossContext(Image target, ModelSet models, LossWeights weights)
    : target_(std::move(target)), models_(std::move(models)), weights_(weights) {
    weights_.validate();
    if (!models_.generator || !models_.perceptual || !models_.identity)
        throw OptimizationError("loss context needs a generator and both extractors");
    const Generator& g = *models_.generator;
    if (target_.channels() != g.out_channels())
        throw OptimizationError("target has " + std::to_string(target_.channels()) +
                                " channels but the generator produces " + std::to_string(g.out_channels()));
    for (const Extractor* ex : {models_.perceptual.get(), models_.identity.get()})
        if (ex->in_channels() != g.out_channels())
            throw OptimizationError("extractor channel count does not match the generator output");
    if (models_.perceptual->feature_role() != FeatureRole::Perceptual)
        throw OptimizationError("perceptual slot holds a non-perceptual extractor");
    if (models_.identity->feature_role() != FeatureRole::Identity)
        throw OptimizationError("identity slot holds a non-identity extractor");
    target_per_ = extract_features(*models_.perceptual, target_);
    target_id_ = extract_features(*models_.identity, target_);
}

LossContext::Evaluation LossContext::evaluate(const LatentVector& z, bool with_gradient) const {
    const Generator& gen = *models_.generator;
    Evaluation ev;
    ev.generated = gen.forward(z);

    struct Term {
        const Extractor* ex;
        const FeatureVector* target;
        double sign;    // +1 pulls features together, -1 pushes them apart
        double weight;
        double norm = 0.0;
        double smooth = 0.0;
        Image input;
        std::vector<double> diff;
    };
    Term terms[2] = {{models_.perceptual.get(), &target_per_, +1.0, weights_.lambda_per, 0.0, 0.0, {}, {}},
                     {models_.identity.get(), &target_id_, -1.0, weights_.lambda_did, 0.0, 0.0, {}, {}}};

    for (Term& t : terms) {
        t.input = resize_bilinear(ev.generated, t.ex->in_height(), t.ex->in_width());
        const FeatureVector f = t.ex->forward(t.input);
        t.diff = difference(f, *t.target);
        const double sq = norm_squared(t.diff);
        t.norm = std::sqrt(sq);
        t.smooth = std::sqrt(sq + kNormSmoothing * kNormSmoothing);
    }
    ev.losses.l_per = terms[0].norm;
    ev.losses.l_did = -terms[1].norm;
    ev.losses.l_final = total_loss(ev.losses.l_per, ev.losses.l_did, weights_);
    ev.objective = weights_.lambda_per * terms[0].smooth - weights_.lambda_did * terms[1].smooth;
    if (!with_gradient) return ev;

    Image image_grad(gen.out_height(), gen.out_width(), gen.out_channels());
    for (Term& t : terms) {
        if (t.weight == 0.0) continue;
        // d(sign * w * |d|_eps)/d f = sign * w * d / |d|_eps
        std::vector<double> cot(t.diff.size());
        const double scale = t.sign * t.weight / t.smooth;
        for (std::size_t i = 0; i < cot.size(); ++i) cot[i] = scale * t.diff[i];
        const Image g = resize_bilinear_adjoint(t.ex->vjp(t.input, cot), gen.out_height(), gen.out_width());
        for (std::size_t i = 0; i < g.size(); ++i) image_grad.values()[i] += g.values()[i];
    }
    ev.gradient = gen.vjp(z, image_grad);
    return ev;
}

std::vector<double> loss_gradient(const LatentVector& z, const Image& target_masked_image,
                                  const ModelSet& models, const LossWeights& w) {
    return LossContext(target_masked_image, models, w).evaluate(z).gradient;
}

LatentVector initial_latent(int dim, const OptConfig& cfg) {
    LatentVector z;
    z.values.assign(dim, 0.0);
    if (cfg.init == InitStrategy::Zero) return z;
    Lcg rng(cfg.seed);
    for (double& v : z.values) v = rng.normal();
    return z;
}

namespace {

bool finite(const LossTerms& t) {
    return std::isfinite(t.l_per) && std::isfinite(t.l_did) && std::isfinite(t.l_final);
}

bool finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

std::string describe(const LossTerms& t, int iteration) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "non-finite loss at iteration %d (l_per=%g, l_did=%g, l_final=%g)",
                  iteration, t.l_per, t.l_did, t.l_final);
    return buf;
}

}  // namespace

OptResult optimize(const Image& target_masked_image, const ModelSet& models, const LossWeights& w,
                   const OptConfig& cfg) {
    cfg.validate();
    const LossContext ctx(target_masked_image, models, w);
    OptResult res;
    LatentVector z = initial_latent(models.generator->latent_dim(), cfg);

    if (cfg.init == InitStrategy::Warm && cfg.warm_iterations > 0) {
        const LossContext warm(target_masked_image, models, {w.lambda_per > 0 ? w.lambda_per : 1.0, 0.0});
        for (int t = 0; t < cfg.warm_iterations; ++t) {
            const auto ev = warm.evaluate(z);
            if (!finite(ev.losses) || !finite(ev.gradient))
                throw OptimizationError("warm start: " + describe(ev.losses, t));
            if (cfg.record_trace) res.warm_trace.push_back(ev.losses);
            for (std::size_t i = 0; i < z.size(); ++i) z.values[i] -= cfg.learning_rate * ev.gradient[i];
        }
    }
    res.initial_latent = z;

    bool have_best = false;
    for (int t = 0; t < cfg.iterations; ++t) {
        const auto ev = ctx.evaluate(z);
        if (!finite(ev.losses) || !finite(ev.gradient))
            throw OptimizationError(describe(ev.losses, t) + " after " + std::to_string(res.trace.size()) +
                                    " recorded iterations");
        if (cfg.record_trace) res.trace.push_back(ev.losses);
        if (!have_best || ev.losses.l_final < res.best.l_final) {
            have_best = true;
            res.best = ev.losses;
            res.best_iteration = t;
            res.latent = z;
            res.image = ev.generated;
        }
        for (std::size_t i = 0; i < z.size(); ++i) z.values[i] -= cfg.learning_rate * ev.gradient[i];
    }
    res.iterations = cfg.iterations;
    return res;
}

void write_trace_csv(std::ostream& out, const std::vector<LossTerms>& trace) {
    out << "iteration,l_per,l_did,l_final\n";
    char buf[128];
    for (std::size_t i = 0; i < trace.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", i, trace[i].l_per, trace[i].l_did,
                      trace[i].l_final);
        out << buf;
    }
}

}  // namespace deid
