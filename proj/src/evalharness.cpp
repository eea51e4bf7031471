#include "deid/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "deid/metrics.hpp"

namespace deid {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') cur.push_back('"'), ++i;
            else if (ch == '"') quoted = false;
            else cur.push_back(ch);
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            cells.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    cells.push_back(trim(cur));
    return cells;
}

}  // namespace

std::vector<ManifestEntry> parse_manifest(const std::string& csv_text, const std::filesystem::path& base_dir) {
    std::vector<ManifestEntry> out;
    std::istringstream in(csv_text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto cells = split_csv_line(t);
        if (out.empty() && lineno == 1 && cells[0] == "subject_id") continue;  // header
        if (cells.size() < 2 || cells.size() > 3 || cells[0].empty() || cells[1].empty())
            throw EvalError("manifest line " + std::to_string(lineno) +
                            ": expected subject_id,image_path[,landmark_path]");
        ManifestEntry e;
        e.subject_id = cells[0];
        e.image_id = cells[1];
        const std::filesystem::path img = cells[1];
        e.image_path = img.is_absolute() ? img : base_dir / img;
        if (cells.size() == 3 && !cells[2].empty()) {
            const std::filesystem::path lm = cells[2];
            e.landmark_path = lm.is_absolute() ? lm : base_dir / lm;
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw EvalError("cannot open manifest " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_manifest(ss.str(), path.parent_path());
}

std::vector<std::string> FeatureDataset::subjects() const {
    std::set<std::string> s;
    for (const auto& e : entries) s.insert(e.subject_id);
    return {s.begin(), s.end()};
}

void FeatureDataset::validate() const {
    for (const auto& e : entries) {
        if (e.subject_id.empty()) throw EvalError("feature row with empty subject id");
        if (e.features.size() != feature_size()) throw EvalError("feature rows differ in length");
    }
}

ExtractionResult extract_dataset(const std::vector<ManifestEntry>& manifest, const Extractor& extractor, int jobs) {
    if (manifest.empty()) throw EvalError("empty manifest");
    std::vector<std::optional<FeatureVector>> features(manifest.size());
    std::vector<std::string> errors(manifest.size());

    auto work = [&](std::size_t i) {
        try {
            features[i] = extract_features(extractor, load_image(manifest[i].image_path));
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    };
    const std::size_t workers = std::clamp<std::size_t>(jobs, 1, manifest.size());
    if (workers == 1) {
        for (std::size_t i = 0; i < manifest.size(); ++i) work(i);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < manifest.size(); i += workers) work(i);
            });
    }

    ExtractionResult res;
    res.dataset.extractor = extractor.spec();
    for (std::size_t i = 0; i < manifest.size(); ++i) {
        if (features[i]) res.dataset.entries.push_back({manifest[i].subject_id, manifest[i].image_id, *features[i]});
        else res.failures.push_back({manifest[i].image_id, errors[i]});
    }
    return res;
}

std::vector<double> LinearIdentifier::scores(const FeatureVector& f) const {
    if (f.size() != mean.size())
        throw EvalError("feature length " + std::to_string(f.size()) + " does not match identifier input " +
                        std::to_string(mean.size()));
    std::vector<double> x(f.size());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (f.values[i] - mean[i]) * inv_scale[i];
    std::vector<double> s(labels.size());
    for (std::size_t c = 0; c < labels.size(); ++c)
        s[c] = std::inner_product(x.begin(), x.end(), weights[c].begin(), biases[c]);
    return s;
}

std::size_t LinearIdentifier::predict_index(const FeatureVector& f) const {
    const auto s = scores(f);
    std::size_t best = 0;
    for (std::size_t c = 1; c < s.size(); ++c)
        if (s[c] > s[best]) best = c;
    return best;
}

LinearIdentifier train_identifier(const FeatureDataset& train, const IdentifierConfig& cfg) {
    train.validate();
    if (train.entries.empty()) throw EvalError("empty training set");
    const auto labels = train.subjects();
    if (labels.size() < 2) throw EvalError("identifier needs at least 2 classes, got " + std::to_string(labels.size()));
    if (cfg.epochs < 1 || !(cfg.learning_rate > 0) || !(cfg.regularization >= 0))
        throw EvalError("invalid identifier training config");

    const std::size_t n = train.entries.size(), d = train.feature_size();
    LinearIdentifier m;
    m.labels = labels;
    m.config = cfg;
    m.mean.assign(d, 0.0);
    m.inv_scale.assign(d, 1.0);
    if (cfg.standardize) {
        for (const auto& e : train.entries)
            for (std::size_t i = 0; i < d; ++i) m.mean[i] += e.features.values[i];
        for (double& v : m.mean) v /= static_cast<double>(n);
        std::vector<double> var(d, 0.0);
        for (const auto& e : train.entries)
            for (std::size_t i = 0; i < d; ++i) {
                const double dv = e.features.values[i] - m.mean[i];
                var[i] += dv * dv;
            }
        for (std::size_t i = 0; i < d; ++i) {
            const double sd = std::sqrt(var[i] / static_cast<double>(n));
            m.inv_scale[i] = sd > 1e-12 ? 1.0 / sd : 1.0;
        }
    }

    std::vector<std::vector<double>> xs(n, std::vector<double>(d));
    std::vector<std::size_t> ys(n);
    for (std::size_t k = 0; k < n; ++k) {
        const auto& e = train.entries[k];
        for (std::size_t i = 0; i < d; ++i) xs[k][i] = (e.features.values[i] - m.mean[i]) * m.inv_scale[i];
        ys[k] = static_cast<std::size_t>(std::lower_bound(labels.begin(), labels.end(), e.subject_id) - labels.begin());
    }

    m.weights.assign(labels.size(), std::vector<double>(d, 0.0));
    m.biases.assign(labels.size(), 0.0);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Lcg rng(cfg.seed);
    std::size_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        for (std::size_t k : order) {
            const double eta = cfg.learning_rate / (1.0 + cfg.learning_rate * cfg.regularization * static_cast<double>(step++));
            for (std::size_t c = 0; c < labels.size(); ++c) {
                auto& w = m.weights[c];
                const double t = ys[k] == c ? 1.0 : -1.0;
                const double s = std::inner_product(xs[k].begin(), xs[k].end(), w.begin(), m.biases[c]);
                const bool violated = t * s < 1.0;
                for (std::size_t i = 0; i < d; ++i) {
                    double g = cfg.regularization * w[i];
                    if (violated) g -= t * xs[k][i];
                    w[i] -= eta * g;
                }
                if (violated) m.biases[c] += eta * t;
            }
        }
    }
    return m;
}

double training_accuracy(const LinearIdentifier& model, const FeatureDataset& data) {
    if (data.entries.empty()) throw EvalError("empty dataset");
    std::size_t correct = 0;
    for (const auto& e : data.entries)
        if (model.predict(e.features) == e.subject_id) ++correct;
    return static_cast<double>(correct) / static_cast<double>(data.entries.size());
}

IdentificationResult identification_asr(const LinearIdentifier& model, const FeatureDataset& protected_set) {
    if (protected_set.entries.empty()) throw EvalError("empty protected set");
    protected_set.validate();
    IdentificationResult res;
    std::size_t successes = 0;
    for (const auto& e : protected_set.entries) {
        IdentificationOutcome o{e.image_id, e.subject_id, model.predict(e.features), false};
        o.success = o.predicted != e.subject_id;
        successes += o.success;
        res.outcomes.push_back(std::move(o));
    }
    res.asr = attack_success_rate(successes, protected_set.entries.size());
    return res;
}

std::string to_string(Comparator c) { return c == Comparator::Distance ? "distance" : "similarity"; }

Comparator parse_comparator(const std::string& s) {
    if (s == "distance") return Comparator::Distance;
    if (s == "similarity") return Comparator::Similarity;
    throw EvalError("unknown comparator '" + s + "'");
}

double pair_score(const FeatureVector& a, const FeatureVector& b, Comparator c) {
    if (a.size() != b.size()) throw EvalError("feature length mismatch in pair");
    if (c == Comparator::Distance) {
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = a.values[i] - b.values[i];
            s += d * d;
        }
        return std::sqrt(s);
    }
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a.values[i] * b.values[i];
        na += a.values[i] * a.values[i];
        nb += b.values[i] * b.values[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / std::sqrt(na * nb);
}

bool accepts(double score, double tau, Comparator c) {
    return c == Comparator::Distance ? score < tau : score > tau;
}

Calibration calibrate_threshold(std::vector<double> scores, double far_target, Comparator c) {
    if (scores.empty()) throw EvalError("no impostor scores to calibrate against");
    if (!(far_target > 0) || far_target > 1) throw EvalError("far target must lie in (0, 1]");
    Calibration cal;
    cal.far_target = far_target;
    cal.impostors = scores.size();
    cal.insufficient = static_cast<double>(scores.size()) * far_target < 1.0;

    // Distance order: ascending; similarity order: descending.
    if (c == Comparator::Distance) std::sort(scores.begin(), scores.end());
    else std::sort(scores.begin(), scores.end(), std::greater<>());

    const double inf = std::numeric_limits<double>::infinity();
    const double toward_reject = c == Comparator::Distance ? -inf : inf;
    cal.rank = static_cast<std::size_t>(std::floor(far_target * static_cast<double>(scores.size())));
    if (far_target >= 1.0) cal.tau = -toward_reject;
    else if (cal.rank == 0) cal.tau = std::nextafter(scores.front(), toward_reject);
    else cal.tau = scores[cal.rank - 1];

    for (double s : scores) cal.accepted += accepts(s, cal.tau, c);
    return cal;
}

std::vector<GenuinePair> make_genuine_pairs(const FeatureDataset& originals, const FeatureDataset& protected_set) {
    std::map<std::string, const FeatureRow*> first;
    for (const auto& e : originals.entries) {
        auto [it, inserted] = first.emplace(e.subject_id, &e);
        if (!inserted && e.image_id < it->second->image_id) it->second = &e;
    }
    std::vector<GenuinePair> pairs;
    for (const auto& p : protected_set.entries) {
        auto it = first.find(p.subject_id);
        if (it == first.end()) continue;
        pairs.push_back({p.subject_id, it->second->image_id, p.image_id, it->second->features, p.features});
    }
    return pairs;
}

std::vector<double> impostor_scores(const FeatureDataset& originals, Comparator c, std::size_t cap, std::uint64_t seed) {
    std::vector<std::pair<std::size_t, std::size_t>> idx;
    const auto& rows = originals.entries;
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = i + 1; j < rows.size(); ++j)
            if (rows[i].subject_id != rows[j].subject_id) idx.emplace_back(i, j);
    if (cap > 0 && idx.size() > cap) {
        Lcg rng(seed);
        for (std::size_t k = 0; k < cap; ++k) std::swap(idx[k], idx[k + rng.below(idx.size() - k)]);
        idx.resize(cap);
    }
    std::vector<double> out;
    out.reserve(idx.size());
    for (auto [i, j] : idx) out.push_back(pair_score(rows[i].features, rows[j].features, c));
    return out;
}

VerificationResult verification_asr(const std::vector<GenuinePair>& pairs, const Calibration& cal, Comparator c) {
    if (pairs.empty()) throw EvalError("no genuine pairs to verify");
    VerificationResult res;
    res.calibration = cal;
    std::size_t successes = 0;
    for (const auto& p : pairs) {
        VerificationOutcome o{p.subject_id, p.original_id, p.protected_id,
                              pair_score(p.original, p.protected_features, c), false};
        o.success = !accepts(o.score, cal.tau, c);
        successes += o.success;
        res.outcomes.push_back(std::move(o));
    }
    res.asr = attack_success_rate(successes, pairs.size());
    return res;
}

namespace {

json number_or_marker(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

}  // namespace

json to_json(const Calibration& c) {
    return {{"far_target", c.far_target}, {"tau", number_or_marker(c.tau)}, {"rank", c.rank},
            {"impostors", c.impostors}, {"accepted", c.accepted}, {"insufficient", c.insufficient}};
}

json to_json(const IdentificationResult& r) {
    json outcomes = json::array();
    for (const auto& o : r.outcomes)
        outcomes.push_back({{"image_id", o.image_id}, {"subject_id", o.subject_id},
                            {"predicted", o.predicted}, {"success", o.success}});
    return {{"asr", r.asr}, {"outcomes", outcomes}};
}

json to_json(const VerificationResult& r) {
    json outcomes = json::array();
    for (const auto& o : r.outcomes)
        outcomes.push_back({{"subject_id", o.subject_id}, {"original_id", o.original_id},
                            {"protected_id", o.protected_id}, {"score", o.score}, {"success", o.success}});
    return {{"asr", r.asr}, {"calibration", to_json(r.calibration)}, {"outcomes", outcomes}};
}

}  // namespace deid
