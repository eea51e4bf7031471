#include "deid/config.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace deid {

using nlohmann::json;

std::string to_string(SourceKind k) {
    switch (k) {
        case SourceKind::Toy: return "toy";
        case SourceKind::Stdio: return "stdio";
        case SourceKind::Tcp: return "tcp";
    }
    return "toy";
}

SourceKind parse_source_kind(const std::string& s) {
    if (s == "toy") return SourceKind::Toy;
    if (s == "stdio") return SourceKind::Stdio;
    if (s == "tcp") return SourceKind::Tcp;
    throw ConfigError("unknown model source '" + s + "' (expected toy|stdio|tcp)");
}

std::string to_string(BlendMode m) { return m == BlendMode::Complete ? "complete" : "literal"; }

BlendMode parse_blend_mode(const std::string& s) {
    if (s == "complete") return BlendMode::Complete;
    if (s == "literal") return BlendMode::Literal;
    throw ConfigError("unknown blend mode '" + s + "' (expected complete|literal)");
}

ModelSpec ModelSource::toy_spec(ModelRole role) const {
    if (role == ModelRole::Generator) return ModelSpec::generator(latent_dim, height, width, channels, seed, hidden);
    return ModelSpec::extractor(role, height, width, channels, features, seed, hidden, gain);
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_number(const std::string& s) {
    auto one = [&](const std::string& t) {
        std::size_t pos = 0;
        double v = 0;
        try {
            v = std::stod(t, &pos);
        } catch (const std::exception&) {
            throw ConfigError("not a number: '" + s + "'");
        }
        if (pos != t.size()) throw ConfigError("not a number: '" + s + "'");
        return v;
    };
    const auto slash = s.find('/');
    if (slash == std::string::npos) return one(s);
    const double den = one(s.substr(slash + 1));
    if (den == 0) throw ConfigError("division by zero in '" + s + "'");
    return one(s.substr(0, slash)) / den;
}

namespace {

int parse_int(const std::string& s) {
    std::size_t pos = 0;
    long v = 0;
    try {
        v = std::stol(s, &pos);
    } catch (const std::exception&) {
        throw ConfigError("not an integer: '" + s + "'");
    }
    if (pos != s.size() || v < INT32_MIN || v > INT32_MAX) throw ConfigError("not an integer: '" + s + "'");
    return static_cast<int>(v);
}

std::uint64_t parse_u64(const std::string& s) {
    if (s.empty() || s[0] == '-') throw ConfigError("not an unsigned integer: '" + s + "'");
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &pos);
    } catch (const std::exception&) {
        throw ConfigError("not an unsigned integer: '" + s + "'");
    }
    if (pos != s.size()) throw ConfigError("not an unsigned integer: '" + s + "'");
    return v;
}

bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("not a boolean: '" + s + "'");
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

struct Field {
    std::function<std::string(const PipelineConfig&)> get;
    std::function<void(PipelineConfig&, const std::string&)> set;
};

template <typename T>
Field number_field(T PipelineConfig::*member) {
    return {[member](const PipelineConfig& c) {
                if constexpr (std::is_same_v<T, double>) return format_double(c.*member);
                else return std::to_string(c.*member);
            },
            [member](PipelineConfig& c, const std::string& v) {
                if constexpr (std::is_same_v<T, double>) c.*member = parse_number(v);
                else if constexpr (std::is_same_v<T, bool>) c.*member = parse_bool(v);
                else c.*member = parse_int(v);
            }};
}

Field bool_field(bool PipelineConfig::*member) {
    return {[member](const PipelineConfig& c) { return std::string(c.*member ? "true" : "false"); },
            [member](PipelineConfig& c, const std::string& v) { c.*member = parse_bool(v); }};
}

void add_source_fields(std::map<std::string, Field>& f, const std::string& prefix,
                       ModelSource PipelineConfig::*src, bool generator) {
    auto s = [src](PipelineConfig& c) -> ModelSource& { return c.*src; };
    auto g = [src](const PipelineConfig& c) -> const ModelSource& { return c.*src; };
    auto int_field = [&](const char* name, int ModelSource::*m) {
        f[prefix + name] = {[g, m](const PipelineConfig& c) { return std::to_string(g(c).*m); },
                            [s, m](PipelineConfig& c, const std::string& v) { s(c).*m = parse_int(v); }};
    };
    f[prefix + "source"] = {[g](const PipelineConfig& c) { return to_string(g(c).kind); },
                            [s](PipelineConfig& c, const std::string& v) { s(c).kind = parse_source_kind(v); }};
    f[prefix + "command"] = {[g](const PipelineConfig& c) { return g(c).command; },
                             [s](PipelineConfig& c, const std::string& v) { s(c).command = v; }};
    f[prefix + "host"] = {[g](const PipelineConfig& c) { return g(c).host; },
                          [s](PipelineConfig& c, const std::string& v) { s(c).host = v; }};
    f[prefix + "seed"] = {[g](const PipelineConfig& c) { return std::to_string(g(c).seed); },
                          [s](PipelineConfig& c, const std::string& v) { s(c).seed = parse_u64(v); }};
    int_field("port", &ModelSource::port);
    int_field("hidden", &ModelSource::hidden);
    int_field("height", &ModelSource::height);
    int_field("width", &ModelSource::width);
    int_field("channels", &ModelSource::channels);
    if (generator) {
        int_field("latent_dim", &ModelSource::latent_dim);
    } else {
        int_field("features", &ModelSource::features);
        f[prefix + "gain"] = {[g](const PipelineConfig& c) { return format_double(g(c).gain); },
                              [s](PipelineConfig& c, const std::string& v) { s(c).gain = parse_number(v); }};
    }
}

const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> f;
        f["loss.lambda_per"] = {[](const PipelineConfig& c) { return format_double(c.loss.lambda_per); },
                                [](PipelineConfig& c, const std::string& v) { c.loss.lambda_per = parse_number(v); }};
        f["loss.lambda_did"] = {[](const PipelineConfig& c) { return format_double(c.loss.lambda_did); },
                                [](PipelineConfig& c, const std::string& v) { c.loss.lambda_did = parse_number(v); }};
        f["opt.iterations"] = {[](const PipelineConfig& c) { return std::to_string(c.opt.iterations); },
                               [](PipelineConfig& c, const std::string& v) { c.opt.iterations = parse_int(v); }};
        f["opt.learning_rate"] = {
            [](const PipelineConfig& c) { return format_double(c.opt.learning_rate); },
            [](PipelineConfig& c, const std::string& v) { c.opt.learning_rate = parse_number(v); }};
        f["opt.init"] = {[](const PipelineConfig& c) { return to_string(c.opt.init); },
                         [](PipelineConfig& c, const std::string& v) { c.opt.init = parse_init(v); }};
        f["opt.seed"] = {[](const PipelineConfig& c) { return std::to_string(c.opt.seed); },
                         [](PipelineConfig& c, const std::string& v) { c.opt.seed = parse_u64(v); }};
        f["opt.warm_iterations"] = {
            [](const PipelineConfig& c) { return std::to_string(c.opt.warm_iterations); },
            [](PipelineConfig& c, const std::string& v) { c.opt.warm_iterations = parse_int(v); }};
        f["mask.margin"] = number_field(&PipelineConfig::mask_margin);
        f["mask.feather"] = number_field(&PipelineConfig::mask_feather);
        f["mask.align"] = bool_field(&PipelineConfig::align);
        f["mask.align_size"] = number_field(&PipelineConfig::align_size);
        f["blend.levels"] = number_field(&PipelineConfig::blend_levels);
        f["blend.mask_role"] = {[](const PipelineConfig& c) { return to_string(c.mask_role); },
                                [](PipelineConfig& c, const std::string& v) { c.mask_role = parse_mask_role(v); }};
        f["blend.mode"] = {[](const PipelineConfig& c) { return to_string(c.blend_mode); },
                           [](PipelineConfig& c, const std::string& v) { c.blend_mode = parse_blend_mode(v); }};
        f["blend.histogram_match"] = bool_field(&PipelineConfig::histogram_match);
        f["run.jobs"] = number_field(&PipelineConfig::jobs);
        f["run.timeout"] = number_field(&PipelineConfig::timeout_seconds);
        add_source_fields(f, "model.generator.", &PipelineConfig::generator, true);
        add_source_fields(f, "model.perceptual.", &PipelineConfig::perceptual, false);
        add_source_fields(f, "model.identity.", &PipelineConfig::identity, false);
        return f;
    }();
    return table;
}

const Field& field(const std::string& key) {
    const auto& f = fields();
    auto it = f.find(key);
    if (it == f.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

}  // namespace

PipelineConfig::PipelineConfig() {
    generator.seed = 1;
    perceptual.seed = 2;
    perceptual.features = 16;
    perceptual.gain = 8800.0;
    identity.seed = 3;
    identity.features = 8;
    identity.gain = 12.0;
}

void PipelineConfig::set(const std::string& key, const std::string& value) {
    try {
        field(key).set(*this, value);
    } catch (const ConfigError& e) {
        if (std::string(e.what()).rfind("unknown config key", 0) == 0) throw;
        throw ConfigError(key + ": " + e.what());
    } catch (const std::runtime_error& e) {
        throw ConfigError(key + ": " + e.what());
    }
}

std::string PipelineConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& PipelineConfig::keys() {
    static const std::vector<std::string> k = [] {
        std::vector<std::string> out;
        for (const auto& [name, f] : fields()) out.push_back(name);
        return out;
    }();
    return k;
}

std::map<std::string, std::string> PipelineConfig::snapshot() const {
    std::map<std::string, std::string> out;
    for (const auto& [name, f] : fields()) out[name] = f.get(*this);
    return out;
}

void PipelineConfig::validate() const {
    loss.validate();
    opt.validate();
    if (!(mask_margin >= 0) || !std::isfinite(mask_margin)) throw ConfigError("mask.margin must be non-negative");
    if (mask_feather < 0) throw ConfigError("mask.feather must be non-negative");
    if (align_size < 0) throw ConfigError("mask.align_size must be non-negative");
    if (blend_levels < 2) throw ConfigError("blend.levels must be at least 2");
    if (jobs < 1) throw ConfigError("run.jobs must be at least 1");
    if (!(timeout_seconds > 0)) throw ConfigError("run.timeout must be positive");
    for (const auto* s : {&generator, &perceptual, &identity}) {
        if (s->kind == SourceKind::Stdio && s->command.empty())
            throw ConfigError("stdio model source needs a command");
        if (s->kind == SourceKind::Tcp && (s->port < 1 || s->port > 65535))
            throw ConfigError("tcp model source needs a port in 1..65535");
    }
    if (generator.kind == SourceKind::Toy) generator.toy_spec(ModelRole::Generator).validate();
    if (perceptual.kind == SourceKind::Toy) perceptual.toy_spec(ModelRole::Perceptual).validate();
    if (identity.kind == SourceKind::Toy) identity.toy_spec(ModelRole::Identity).validate();
}

std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const std::string where = "config line " + std::to_string(lineno) + ": ";
        if (t.front() == '[') {
            if (t.back() != ']') throw ConfigError(where + "unterminated section header");
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty()) throw ConfigError(where + "empty section name");
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty()) throw ConfigError(where + "missing key");
        if (!value.empty() && value.front() == '"') {
            const auto close = value.find('"', 1);
            if (close == std::string::npos) throw ConfigError(where + "unterminated string");
            const std::string rest = trim(value.substr(close + 1));
            if (!rest.empty() && rest[0] != '#') throw ConfigError(where + "unexpected text after string");
            value = value.substr(1, close - 1);
        } else {
            const auto hash = value.find('#');
            if (hash != std::string::npos) value = trim(value.substr(0, hash));
        }
        out[section.empty() ? key : section + "." + key] = value;
    }
    return out;
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

std::string env_name(const std::string& key) {
    std::string n = "DEID_";
    for (char ch : key) n.push_back(ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
    return n;
}

std::map<std::string, std::string> env_overrides(const std::function<const char*(const char*)>& getenv_fn) {
    std::map<std::string, std::string> out;
    for (const auto& key : PipelineConfig::keys())
        if (const char* v = getenv_fn(env_name(key).c_str())) out[key] = v;
    return out;
}

PipelineConfig load_config(const std::optional<std::filesystem::path>& file,
                           const std::map<std::string, std::string>& cli_overrides,
                           const std::function<const char*(const char*)>& getenv_fn) {
    PipelineConfig cfg;
    if (file)
        for (const auto& [k, v] : read_config_file(*file)) cfg.set(k, v);
    for (const auto& [k, v] : env_overrides(getenv_fn)) cfg.set(k, v);
    for (const auto& [k, v] : cli_overrides) cfg.set(k, v);
    cfg.validate();
    return cfg;
}

json to_json(const PipelineConfig& cfg) {
    json j = json::object();
    for (const auto& [k, v] : cfg.snapshot()) j[k] = v;
    return j;
}

PipelineConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config snapshot must be a JSON object");
    PipelineConfig cfg;
    for (const auto& [k, v] : j.items()) {
        if (!v.is_string()) throw ConfigError("config snapshot value for '" + k + "' must be a string");
        cfg.set(k, v.get<std::string>());
    }
    cfg.validate();
    return cfg;
}

}  // namespace deid
