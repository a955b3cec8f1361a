#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusenet/errors.hpp"
#include "fusenet/model.hpp"

namespace fusenet {

/// Model checkpoint archive: magic, little-endian manifest length, JSON
/// manifest, then one raw little-endian float64 blob per parameter in
/// manifest order. Round trips are bit-exact.
inline constexpr char kCheckpointMagic[8] = {'F', 'N', 'M', 'O', 'D', 'E', 'L', '1'};
inline constexpr int kCheckpointSchemaVersion = 1;

inline nlohmann::json arch_to_json(const ArchParams& a) {
    return nlohmann::json{{"nf1", a.nf1},
                          {"nf2", a.nf2},
                          {"nf3", a.nf3},
                          {"nf4", a.nf4},
                          {"nk1", a.nk1},
                          {"nk2", a.nk2},
                          {"nk3", a.nk3},
                          {"nk4", a.nk4},
                          {"np1", a.np1},
                          {"cnn_dropout", a.cnn_dropout},
                          {"cnn_hidden", a.cnn_hidden},
                          {"lstm_units", a.lstm_units},
                          {"lstm_dense1", a.lstm_dense1},
                          {"lstm_dense2", a.lstm_dense2},
                          {"lstm_dropout1", a.lstm_dropout1},
                          {"lstm_dropout2", a.lstm_dropout2},
                          {"lstm_dropout3", a.lstm_dropout3},
                          {"window", a.window}};
}

inline ArchParams arch_from_json(const nlohmann::json& j) {
    ArchParams a;
    try {
        a.nf1 = j.at("nf1").get<int>();
        a.nf2 = j.at("nf2").get<int>();
        a.nf3 = j.at("nf3").get<int>();
        a.nf4 = j.at("nf4").get<int>();
        a.nk1 = j.at("nk1").get<int>();
        a.nk2 = j.at("nk2").get<int>();
        a.nk3 = j.at("nk3").get<int>();
        a.nk4 = j.at("nk4").get<int>();
        a.np1 = j.at("np1").get<int>();
        a.cnn_dropout = j.at("cnn_dropout").get<double>();
        a.cnn_hidden = j.at("cnn_hidden").get<int>();
        a.lstm_units = j.at("lstm_units").get<int>();
        a.lstm_dense1 = j.at("lstm_dense1").get<int>();
        a.lstm_dense2 = j.at("lstm_dense2").get<int>();
        a.lstm_dropout1 = j.at("lstm_dropout1").get<double>();
        a.lstm_dropout2 = j.at("lstm_dropout2").get<double>();
        a.lstm_dropout3 = j.at("lstm_dropout3").get<double>();
        a.window = j.at("window").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(std::string("arch json: ") + e.what());
    }
    a.validate();
    return a;
}

namespace detail {

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(buf, 8);
}

inline std::uint64_t read_u64_le(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

inline void write_f64_le(std::ostream& os, const dvec& data) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * 8));
    } else {
        for (double d : data) {
            std::uint64_t bits;
            std::memcpy(&bits, &d, 8);
            write_u64_le(os, bits);
        }
    }
}

inline void read_f64_le(std::istream& is, dvec& data) {
    if constexpr (std::endian::native == std::endian::little) {
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 8));
    } else {
        for (double& d : data) {
            const std::uint64_t bits = read_u64_le(is);
            std::memcpy(&d, &bits, 8);
        }
    }
}

}  // namespace detail

inline void save_model(const ModelGraph& model, const std::string& path) {
    nlohmann::json manifest;
    manifest["schema_version"] = kCheckpointSchemaVersion;
    manifest["base"] = to_string(model.base);
    manifest["topology"] = to_string(model.topology.kind);
    manifest["channels"] = model.topology.channels;
    manifest["seed"] = model.seed;
    manifest["arch"] = arch_to_json(model.arch);
    nlohmann::json plist = nlohmann::json::array();
    for (const auto& [name, t] : model.params) plist.push_back({{"name", name}, {"shape", t.shape}});
    manifest["params"] = plist;

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("cannot open checkpoint for writing: " + path);
    const std::string mtext = manifest.dump();
    os.write(kCheckpointMagic, 8);
    detail::write_u64_le(os, mtext.size());
    os.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    for (const auto& [name, t] : model.params) detail::write_f64_le(os, t.data);
    if (!os) throw io_error("short write while saving checkpoint: " + path);
}

inline ModelGraph load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw parse_error("not a model checkpoint (bad magic): " + path);
    const std::uint64_t mlen = detail::read_u64_le(is);
    std::string mtext(mlen, '\0');
    is.read(mtext.data(), static_cast<std::streamsize>(mlen));
    if (!is) throw parse_error("truncated checkpoint manifest: " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mtext);
    } catch (const nlohmann::json::exception& e) {
        throw parse_error("checkpoint manifest is not valid json: " + std::string(e.what()));
    }
    try {
        if (manifest.at("schema_version").get<int>() != kCheckpointSchemaVersion)
            throw parse_error("unsupported checkpoint schema version in " + path);
        const BaseKind base = base_kind_from_string(manifest.at("base").get<std::string>());
        const Topology topo(topology_from_string(manifest.at("topology").get<std::string>()),
                            manifest.at("channels").get<std::vector<std::string>>());
        const ArchParams arch = arch_from_json(manifest.at("arch"));
        const std::uint64_t seed = manifest.at("seed").get<std::uint64_t>();

        ModelGraph model = assemble(topo, base, arch, seed);
        for (const auto& entry : manifest.at("params")) {
            const std::string name = entry.at("name").get<std::string>();
            const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
            auto it = model.params.find(name);
            if (it == model.params.end())
                throw parse_error("checkpoint parameter '" + name + "' does not exist in the assembled model");
            if (it->second.shape != shape)
                throw parse_error("checkpoint parameter '" + name + "' shape mismatch");
            detail::read_f64_le(is, it->second.data);
        }
        if (!is) throw parse_error("truncated checkpoint blob section: " + path);
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw parse_error("checkpoint manifest missing fields: " + std::string(e.what()));
    }
}

}  // namespace fusenet
