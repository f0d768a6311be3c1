#pragma once

#include <openssl/evp.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fap/tensor.hpp"

// Checkpoint files: [u64 little-endian manifest length][JSON manifest][raw
// little-endian f64 blob]. The manifest lists tensor name/shape/byte-offset
// and carries the SHA-256 of the blob, which doubles as the freeze hash.

namespace fap {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline std::string sha256_hex(const unsigned char* data, std::size_t len) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int dlen = 0;
    if (!EVP_Digest(data, len, digest, &dlen, EVP_sha256(), nullptr))
        throw std::runtime_error("sha256: digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(dlen * 2);
    for (unsigned int i = 0; i < dlen; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

inline std::vector<unsigned char> pack_blob(const NamedTensors& items) {
    std::size_t total = 0;
    for (const auto& [name, t] : items) total += t.size() * sizeof(double);
    std::vector<unsigned char> blob(total);
    std::size_t off = 0;
    for (const auto& [name, t] : items) {
        std::memcpy(blob.data() + off, t.values().data(), t.size() * sizeof(double));
        off += t.size() * sizeof(double);
    }
    return blob;
}

// content hash over the concatenated tensor payloads in declaration order
inline std::string tensors_hash(const NamedTensors& items) {
    auto blob = pack_blob(items);
    return sha256_hex(blob.data(), blob.size());
}

inline std::string save_checkpoint(const std::string& path, const std::string& kind,
                                   const nlohmann::json& meta, const NamedTensors& items) {
    auto blob = pack_blob(items);
    std::string hash = sha256_hex(blob.data(), blob.size());
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["kind"] = kind;
    manifest["meta"] = meta;
    manifest["hash"] = hash;
    manifest["tensors"] = nlohmann::json::array();
    std::size_t off = 0;
    for (const auto& [name, t] : items) {
        manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", off}});
        off += t.size() * sizeof(double);
    }
    std::string mjson = manifest.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    std::uint64_t mlen = mjson.size();
    f.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    f.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
    f.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
    return hash;
}

struct Checkpoint {
    nlohmann::json manifest;
    std::map<std::string, Tensor> tensors;

    const Tensor& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
        return it->second;
    }
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::uint64_t mlen = 0;
    f.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    std::string mjson(mlen, '\0');
    f.read(mjson.data(), static_cast<std::streamsize>(mlen));
    std::vector<unsigned char> blob{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
    if (!f.eof() && !f) throw std::runtime_error("truncated checkpoint: " + path);

    Checkpoint ck;
    ck.manifest = nlohmann::json::parse(mjson);
    std::string expect = ck.manifest.at("hash");
    std::string got = sha256_hex(blob.data(), blob.size());
    if (expect != got) throw std::runtime_error("checkpoint hash mismatch in " + path);
    for (const auto& entry : ck.manifest.at("tensors")) {
        Shape shape = entry.at("shape").get<Shape>();
        std::size_t off = entry.at("offset");
        std::size_t bytes = numel(shape) * sizeof(double);
        if (off + bytes > blob.size()) throw std::runtime_error("checkpoint blob overrun in " + path);
        std::vector<double> vals(numel(shape));
        std::memcpy(vals.data(), blob.data() + off, bytes);
        ck.tensors.emplace(entry.at("name"), Tensor::from_data(shape, std::move(vals)));
    }
    return ck;
}

}  // namespace fap
