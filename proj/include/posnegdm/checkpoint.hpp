#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "posnegdm/dualsight.hpp"
#include "posnegdm/mortality.hpp"

namespace posnegdm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format mandates a little-endian host");

// Checkpoint = text manifest (<prefix>.manifest) + weight blob (<prefix>.bin,
// little-endian float32 in manifest order). Round trips are bitwise.
namespace ckpt_detail {

constexpr const char* kMagic = "posnegdm-checkpoint v1";

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace ckpt_detail

struct CheckpointManifest {
    std::string kind;
    std::map<std::string, std::string> config;
    struct Entry {
        std::string name;
        std::vector<int> shape;
        size_t offset;  // in floats
    };
    std::vector<Entry> params;
    uint64_t blob_hash = 0;
};

template <typename Real>
void checkpoint_save(const std::string& kind, const std::map<std::string, std::string>& config,
                     std::vector<NamedParam<Real>> params, const std::string& prefix) {
    std::vector<float> blob;
    std::ostringstream manifest;
    manifest << ckpt_detail::kMagic << "\n";
    manifest << "kind " << kind << "\n";
    for (const auto& [k, v] : config) manifest << "config " << k << " " << v << "\n";
    for (const auto& p : params) {
        manifest << "param " << p.name << " " << p.tensor.shape().size();
        for (int d : p.tensor.shape()) manifest << " " << d;
        manifest << " " << blob.size() << "\n";
        for (Real v : p.tensor.values()) blob.push_back(static_cast<float>(v));
    }
    uint64_t hash = fnv1a64(blob.data(), blob.size() * sizeof(float));
    manifest << "hash " << ckpt_detail::hex64(hash) << "\n";

    std::ofstream mf(prefix + ".manifest");
    if (!mf) throw std::runtime_error("checkpoint_save: cannot write " + prefix + ".manifest");
    mf << manifest.str();
    std::ofstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) throw std::runtime_error("checkpoint_save: cannot write " + prefix + ".bin");
    bf.write(reinterpret_cast<const char*>(blob.data()),
             static_cast<std::streamsize>(blob.size() * sizeof(float)));
}

inline std::pair<CheckpointManifest, std::vector<float>> checkpoint_read(const std::string& prefix) {
    std::ifstream mf(prefix + ".manifest");
    if (!mf) throw std::runtime_error("checkpoint_read: cannot open " + prefix + ".manifest");
    std::string line;
    if (!std::getline(mf, line) || line != ckpt_detail::kMagic)
        throw std::runtime_error("checkpoint_read: bad or unsupported format version in " + prefix);
    CheckpointManifest man;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "kind") {
            ss >> man.kind;
        } else if (tag == "config") {
            std::string k, v;
            ss >> k >> v;
            man.config[k] = v;
        } else if (tag == "param") {
            CheckpointManifest::Entry e;
            size_t ndims;
            ss >> e.name >> ndims;
            e.shape.resize(ndims);
            for (auto& d : e.shape) ss >> d;
            ss >> e.offset;
            man.params.push_back(std::move(e));
        } else if (tag == "hash") {
            std::string h;
            ss >> h;
            man.blob_hash = std::stoull(h, nullptr, 16);
        } else {
            throw std::runtime_error("checkpoint_read: unknown manifest line '" + line + "'");
        }
    }

    std::ifstream bf(prefix + ".bin", std::ios::binary | std::ios::ate);
    if (!bf) throw std::runtime_error("checkpoint_read: cannot open " + prefix + ".bin");
    auto bytes = static_cast<size_t>(bf.tellg());
    bf.seekg(0);
    std::vector<float> blob(bytes / sizeof(float));
    bf.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(bytes));
    uint64_t hash = fnv1a64(blob.data(), blob.size() * sizeof(float));
    if (hash != man.blob_hash)
        throw std::runtime_error("checkpoint_read: blob hash mismatch for " + prefix +
                                 " (manifest " + ckpt_detail::hex64(man.blob_hash) + ", blob " +
                                 ckpt_detail::hex64(hash) + ")");
    return {std::move(man), std::move(blob)};
}

template <typename Real>
void checkpoint_apply(const CheckpointManifest& man, const std::vector<float>& blob,
                      std::vector<NamedParam<Real>> params) {
    if (man.params.size() != params.size())
        throw std::runtime_error("checkpoint: parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& e = man.params[i];
        auto& t = params[i].tensor;
        if (e.name != params[i].name)
            throw std::runtime_error("checkpoint: parameter name mismatch, expected '" +
                                     params[i].name + "', manifest has '" + e.name + "'");
        if (e.shape != t.shape())
            throw std::runtime_error("checkpoint: shape mismatch for '" + e.name + "': manifest " +
                                     shape_str(e.shape) + " vs model " + shape_str(t.shape()));
        if (e.offset + t.size() > blob.size())
            throw std::runtime_error("checkpoint: blob too short for '" + e.name + "'");
        for (size_t j = 0; j < t.size(); ++j)
            t.values()[j] = static_cast<Real>(blob[e.offset + j]);
    }
}

// ---- model-specific wrappers -------------------------------------------------

template <typename Real>
void save_mortality_classifier(MortalityClassifier<Real>& mc, const std::string& prefix) {
    std::map<std::string, std::string> cfg{
        {"input_dim", std::to_string(mc.input_dim())},
        {"dropout", std::to_string(static_cast<double>(mc.dropout_rate()))}};
    checkpoint_save("mc", cfg, mc.named_parameters_unchecked(), prefix);
}

template <typename Real>
MortalityClassifier<Real> load_mortality_classifier(const std::string& prefix) {
    auto [man, blob] = checkpoint_read(prefix);
    if (man.kind != "mc")
        throw std::runtime_error("checkpoint: expected a mortality classifier at " + prefix +
                                 ", found kind '" + man.kind + "'");
    MortalityClassifier<Real> mc(std::stoi(man.config.at("input_dim")), 0,
                                 static_cast<Real>(std::stod(man.config.at("dropout"))));
    checkpoint_apply(man, blob, mc.named_parameters_unchecked());
    return mc;
}

template <typename Real>
void save_dualsight(DualSight<Real>& model, const std::string& prefix) {
    const auto& c = model.config();
    std::map<std::string, std::string> cfg{
        {"n_layers", std::to_string(c.n_layers)},
        {"n_heads", std::to_string(c.n_heads)},
        {"embed_dim", std::to_string(c.embed_dim)},
        {"context_len", std::to_string(c.context_len)},
        {"dropout", std::to_string(c.dropout)},
        {"state_dim", std::to_string(c.state_dim)},
        {"n_actions", std::to_string(c.n_actions)},
        {"max_timestep", std::to_string(c.max_timestep)},
        {"use_return_tokens", c.use_return_tokens ? "1" : "0"}};
    checkpoint_save("dualsight", cfg, model.named_parameters(), prefix);
}

template <typename Real>
DualSight<Real> load_dualsight(const std::string& prefix) {
    auto [man, blob] = checkpoint_read(prefix);
    if (man.kind != "dualsight")
        throw std::runtime_error("checkpoint: expected a dualsight model at " + prefix +
                                 ", found kind '" + man.kind + "'");
    DualSightConfig c;
    c.n_layers = std::stoi(man.config.at("n_layers"));
    c.n_heads = std::stoi(man.config.at("n_heads"));
    c.embed_dim = std::stoi(man.config.at("embed_dim"));
    c.context_len = std::stoi(man.config.at("context_len"));
    c.dropout = std::stod(man.config.at("dropout"));
    c.state_dim = std::stoi(man.config.at("state_dim"));
    c.n_actions = std::stoi(man.config.at("n_actions"));
    c.max_timestep = std::stoi(man.config.at("max_timestep"));
    c.use_return_tokens = man.config.at("use_return_tokens") == "1";
    DualSight<Real> model(c, 0);
    checkpoint_apply(man, blob, model.named_parameters());
    return model;
}

}  // namespace posnegdm
