#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deid/diffmodel.hpp"

namespace deid {

struct EvalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One row of a `subject_id,image_path,landmark_path` manifest. Relative paths
// are resolved against the manifest's directory; image_id keeps the path as written.
struct ManifestEntry {
    std::string subject_id;
    std::string image_id;
    std::filesystem::path image_path;
    std::optional<std::filesystem::path> landmark_path;
};

std::vector<ManifestEntry> parse_manifest(const std::string& csv_text, const std::filesystem::path& base_dir);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

struct FeatureRow {
    std::string subject_id;
    std::string image_id;
    FeatureVector features;
};

struct FeatureDataset {
    std::vector<FeatureRow> entries;
    std::optional<ModelSpec> extractor;

    std::size_t feature_size() const { return entries.empty() ? 0 : entries.front().features.size(); }
    std::vector<std::string> subjects() const;  // sorted, distinct
    void validate() const;
};

struct ExtractionFailure {
    std::string image_id;
    std::string reason;
};

struct ExtractionResult {
    FeatureDataset dataset;
    std::vector<ExtractionFailure> failures;
};

// Loads each image, resamples it to the extractor input and extracts features.
// Unreadable images are skipped and reported. Row order follows the manifest.
ExtractionResult extract_dataset(const std::vector<ManifestEntry>& manifest, const Extractor& extractor,
                                 int jobs = 1);

struct IdentifierConfig {
    int epochs = 200;
    double learning_rate = 0.1;
    double regularization = 1e-3;
    std::uint64_t seed = 0;
    bool standardize = true;
};

// One-vs-rest linear classifier trained with hinge loss and L2 regularization.
struct LinearIdentifier {
    std::vector<std::string> labels;             // sorted class labels
    std::vector<std::vector<double>> weights;    // one row per class
    std::vector<double> biases;
    std::vector<double> mean;                    // feature standardization
    std::vector<double> inv_scale;
    IdentifierConfig config;

    std::vector<double> scores(const FeatureVector& f) const;
    // Index of the highest score; ties go to the lowest class index.
    std::size_t predict_index(const FeatureVector& f) const;
    const std::string& predict(const FeatureVector& f) const { return labels[predict_index(f)]; }
};

LinearIdentifier train_identifier(const FeatureDataset& train, const IdentifierConfig& cfg = {});

double training_accuracy(const LinearIdentifier& model, const FeatureDataset& data);

struct IdentificationOutcome {
    std::string image_id;
    std::string subject_id;
    std::string predicted;
    bool success = false;  // misclassified
};

struct IdentificationResult {
    double asr = 0.0;
    std::vector<IdentificationOutcome> outcomes;
};

IdentificationResult identification_asr(const LinearIdentifier& model, const FeatureDataset& protected_set);

enum class Comparator { Distance, Similarity };

std::string to_string(Comparator c);
Comparator parse_comparator(const std::string& s);

// Euclidean distance or cosine similarity.
double pair_score(const FeatureVector& a, const FeatureVector& b, Comparator c);
// Distance: accept iff score < tau. Similarity: accept iff score > tau.
bool accepts(double score, double tau, Comparator c);

struct Calibration {
    double tau = 0.0;
    double far_target = 0.0;
    std::size_t rank = 0;          // floor(far_target * N)
    std::size_t impostors = 0;
    bool insufficient = false;     // fewer than 1/far_target impostor scores
    std::size_t accepted = 0;      // impostors accepted at tau
};

// tau is the floor(far*N)-th smallest distance (largest similarity), so at most
// floor(far*N) - 1 impostors pass the strict rule. far >= 1 accepts everything;
// floor(far*N) == 0 places tau just beyond the extreme score so nothing passes.
Calibration calibrate_threshold(std::vector<double> impostor_scores, double far_target, Comparator c);

struct GenuinePair {
    std::string subject_id;
    std::string original_id;
    std::string protected_id;
    FeatureVector original;
    FeatureVector protected_features;
};

// Pairs the lexicographically first original image of each subject with every
// protected image of that subject. Protected subjects with no original are skipped.
std::vector<GenuinePair> make_genuine_pairs(const FeatureDataset& originals, const FeatureDataset& protected_set);

// Scores of cross-subject pairs among the originals. When there are more than
// `cap` pairs a seeded sample of `cap` pairs is drawn without replacement.
std::vector<double> impostor_scores(const FeatureDataset& originals, Comparator c, std::size_t cap,
                                    std::uint64_t seed);

struct VerificationOutcome {
    std::string subject_id;
    std::string original_id;
    std::string protected_id;
    double score = 0.0;
    bool success = false;  // genuine pair not matched
};

struct VerificationResult {
    Calibration calibration;
    double asr = 0.0;
    std::vector<VerificationOutcome> outcomes;
};

VerificationResult verification_asr(const std::vector<GenuinePair>& pairs, const Calibration& cal, Comparator c);

nlohmann::json to_json(const IdentificationResult& r);
nlohmann::json to_json(const VerificationResult& r);
nlohmann::json to_json(const Calibration& c);

}  // namespace deid
