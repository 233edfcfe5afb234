#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crowd/checkpoint.hpp"
#include "crowd/errors.hpp"
#include "crowd/trainer.hpp"

namespace crowd {

// Flat key=value configuration. Every key has a documented default below;
// unknown keys are rejected. '#' starts a comment, blank lines are ignored.
class FlatConfig {
public:
    FlatConfig() {
        set_default("seed", "1", "master RNG seed");
        set_default("backbone.channels", "16,32,32", "channels per stage; 2x pool between stages");
        set_default("backbone.kernel", "3", "odd conv kernel size");
        set_default("mldl.prototypes", "3", "number of density prototypes (V)");
        set_default("mldl.concentration", "10", "vMF concentration r (E-step inverse temperature)");
        set_default("mldl.max_iter", "50", "EM iteration cap");
        set_default("mldl.tol", "1e-06", "EM mean prototype movement tolerance (1-cos)");
        set_default("mldl.weighted", "0", "weight the M-step by sample norms (0/1)");
        set_default("guidance.dilation", "2", "dilation rate of the third guidance conv");
        set_default("guidance.use_ldg", "1", "enable local density guidance (0/1)");
        set_default("guidance.use_gdg", "1", "enable global density guidance (0/1)");
        set_default("guidance.tile_q", "0", "tile the global token per cell (0/1)");
        set_default("guidance.shared_branch_convs", "0", "share conv weights across branches (0/1)");
        set_default("guidance.attention_dim", "0", "attention dim d_a; 0 means feature channels");
        set_default("density.sigma", "4", "GT Gaussian kernel width, px");
        set_default("train.lr", "0.001", "Adam base learning rate");
        set_default("train.batch", "4", "episodes per iteration");
        set_default("train.iterations", "2000", "training iterations");
        set_default("train.poly_power", "0.9", "poly LR decay power");
        set_default("train.crop", "48", "square training crop, px");
        set_default("train.clip_norm", "5", "global gradient-norm clip; 0 disables");
        set_default("train.checkpoint_every", "0", "periodic checkpoint interval; 0 disables");
        set_default("train.threads", "1", "episode-parallel worker threads");
        set_default("augment.mirror_prob", "0.5", "horizontal mirror probability");
        set_default("augment.blur_prob", "0.3", "Gaussian blur probability");
        set_default("augment.blur_sigma_lo", "0.5", "blur sigma lower bound");
        set_default("augment.blur_sigma_hi", "1.5", "blur sigma upper bound");
        set_default("eval.scene_mean", "0", "report scene-mean averages as the headline (0/1)");
    }

    void set(const std::string& key, const std::string& value) {
        for (auto& [k, v] : entries_)
            if (k == key) {
                v = value;
                return;
            }
        throw ConfigError("unknown config key: " + key);
    }

    const std::string& get(const std::string& key) const {
        for (const auto& [k, v] : entries_)
            if (k == key) return v;
        throw ConfigError("unknown config key: " + key);
    }

    double get_double(const std::string& key) const {
        const std::string& s = get(key);
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": cannot parse '" + s + "' as number");
        }
    }

    long get_long(const std::string& key) const {
        const std::string& s = get(key);
        try {
            std::size_t pos = 0;
            const long v = std::stol(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": cannot parse '" + s + "' as integer");
        }
    }

    bool get_bool(const std::string& key) const {
        const long v = get_long(key);
        if (v != 0 && v != 1) throw ConfigError("config key " + key + ": expected 0 or 1");
        return v == 1;
    }

    std::vector<std::size_t> get_size_list(const std::string& key) const {
        std::vector<std::size_t> out;
        std::istringstream is(get(key));
        std::string tok;
        while (std::getline(is, tok, ',')) {
            try {
                out.push_back(static_cast<std::size_t>(std::stoul(tok)));
            } catch (const std::exception&) {
                throw ConfigError("config key " + key + ": bad list element '" + tok + "'");
            }
        }
        if (out.empty()) throw ConfigError("config key " + key + ": empty list");
        return out;
    }

    void parse_line(const std::string& raw, std::size_t lineno) {
        std::string line = raw;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        line = trim(line);
        if (line.empty()) return;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        set(key, value);
    }

    void load_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config " + path);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) parse_line(line, ++lineno);
    }

    std::string to_text() const {
        std::ostringstream os;
        for (const auto& [k, v] : entries_) os << k << " = " << v << "\n";
        return os.str();
    }

    std::uint64_t fingerprint() const {
        const std::string text = to_text();
        return fnv1a(reinterpret_cast<const unsigned char*>(text.data()), text.size());
    }

    std::vector<std::string> diff_keys(const FlatConfig& other) const {
        std::vector<std::string> keys;
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].second != other.entries_[i].second)
                keys.push_back(entries_[i].first);
        return keys;
    }

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
    const std::vector<std::pair<std::string, std::string>>& docs() const { return docs_; }

    std::uint64_t seed() const { return static_cast<std::uint64_t>(get_long("seed")); }

    TrainConfig to_train_config() const {
        TrainConfig cfg;
        cfg.model.backbone.channels = get_size_list("backbone.channels");
        cfg.model.backbone.kernel = static_cast<std::size_t>(get_long("backbone.kernel"));
        std::size_t factor = 1;
        for (std::size_t i = 0; i + 1 < cfg.model.backbone.channels.size(); ++i) factor *= 2;
        cfg.model.backbone.downsample_factor = factor;
        cfg.model.num_prototypes = static_cast<std::size_t>(get_long("mldl.prototypes"));
        cfg.model.concentration = get_double("mldl.concentration");
        cfg.model.em_max_iter = static_cast<std::size_t>(get_long("mldl.max_iter"));
        cfg.model.em_tol = get_double("mldl.tol");
        cfg.model.weighted_em = get_bool("mldl.weighted");
        cfg.model.dilation_rate = static_cast<int>(get_long("guidance.dilation"));
        cfg.model.use_ldg = get_bool("guidance.use_ldg");
        cfg.model.use_gdg = get_bool("guidance.use_gdg");
        cfg.model.tile_q = get_bool("guidance.tile_q");
        cfg.model.shared_branch_convs = get_bool("guidance.shared_branch_convs");
        cfg.model.attention_dim = static_cast<std::size_t>(get_long("guidance.attention_dim"));
        cfg.sigma = get_double("density.sigma");
        cfg.lr = get_double("train.lr");
        cfg.batch = static_cast<std::size_t>(get_long("train.batch"));
        cfg.iterations = static_cast<std::size_t>(get_long("train.iterations"));
        cfg.poly_power = get_double("train.poly_power");
        cfg.augment.crop_h = cfg.augment.crop_w = static_cast<std::size_t>(get_long("train.crop"));
        cfg.clip_norm = get_double("train.clip_norm");
        cfg.checkpoint_every = static_cast<std::size_t>(get_long("train.checkpoint_every"));
        cfg.threads = static_cast<std::size_t>(get_long("train.threads"));
        cfg.augment.mirror_prob = get_double("augment.mirror_prob");
        cfg.augment.blur_prob = get_double("augment.blur_prob");
        cfg.augment.blur_sigma_lo = get_double("augment.blur_sigma_lo");
        cfg.augment.blur_sigma_hi = get_double("augment.blur_sigma_hi");
        cfg.validate();
        return cfg;
    }

private:
    void set_default(std::string key, std::string value, std::string doc) {
        entries_.emplace_back(key, value);
        docs_.emplace_back(std::move(key), std::move(doc));
    }

    std::vector<std::pair<std::string, std::string>> entries_;
    std::vector<std::pair<std::string, std::string>> docs_;
};

} // namespace crowd
