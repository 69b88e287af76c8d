#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "ibner/model.hpp"
#include "ibner/trainer.hpp"

namespace ibner {

// Checkpoint file layout (little-endian):
//
//   8 bytes   magic "IBNERCKP"
//   u32       format version
//   u64       header length H
//   H bytes   JSON header: config, vocab, types, train state
//   u64       tensor count
//   per tensor: u32 name length, name, u32 rank, u64 dims[rank], f64 data[numel]
//   u64       FNV-1a 64 of every preceding byte
//
// Tensors are named "param/<name>", "adam.m/<name>" and "adam.v/<name>".

inline constexpr char kCheckpointMagic[8] = {'I', 'B', 'N', 'E', 'R', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const char* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace detail {

class ByteWriter {
public:
    template <class T>
    void put(T v) {
        char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        buf_.append(b, sizeof(T));
    }
    void bytes(const std::string& s) { buf_.append(s); }
    void tensor(const std::string& name, const Tensor& t) {
        put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        bytes(name);
        put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) put<std::uint64_t>(d);
        for (double v : t.storage()) put<double>(v);
    }
    std::string& buffer() { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    ByteReader(const std::string& buf, std::size_t end, std::string source)
        : buf_(buf), end_(end), source_(std::move(source)) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::pair<std::string, Tensor> tensor() {
        std::string name = bytes(get<std::uint32_t>());
        const auto rank = get<std::uint32_t>();
        if (rank == 0 || rank > 2) fail("tensor '" + name + "' has unsupported rank");
        Shape shape;
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape.push_back(get<std::uint64_t>());
            if (shape.back() == 0 || shape.back() > (end_ - pos_)) fail("tensor '" + name + "' has invalid shape");
            numel *= shape.back();
        }
        if (numel > (end_ - pos_) / sizeof(double)) fail("tensor '" + name + "' truncated");
        std::vector<double> data(numel);
        for (auto& v : data) v = get<double>();
        return {std::move(name), Tensor(std::move(shape), std::move(data))};
    }
    std::size_t pos() const { return pos_; }

    [[noreturn]] void fail(const std::string& what) const { throw DataError(source_ + ": " + what); }

private:
    void need(std::size_t n) const {
        if (n > end_ - pos_) fail("truncated checkpoint");
    }
    const std::string& buf_;
    std::size_t end_;
    std::size_t pos_ = 0;
    std::string source_;
};

inline nlohmann::json history_json(const std::vector<LossRecord>& h) {
    auto arr = nlohmann::json::array();
    for (const auto& r : h) arr.push_back({r.step, r.total, r.vib, r.sr, r.sg});
    return arr;
}

inline std::vector<LossRecord> history_from(const nlohmann::json& j) {
    std::vector<LossRecord> out;
    for (const auto& r : j) {
        out.push_back({r.at(0).get<std::size_t>(), r.at(1).get<double>(), r.at(2).get<double>(),
                       r.at(3).get<double>(), r.at(4).get<double>()});
    }
    return out;
}

}  // namespace detail

/// Serializes a model and its training state to bytes.
inline std::string serialize_checkpoint(const Model& m, const TrainState& st) {
    nlohmann::json header;
    header["config"] = m.config();
    header["vocab"] = m.vocab().tokens();
    header["types"] = m.types().names();
    nlohmann::json adam_steps = nlohmann::json::object();
    for (const auto& [name, mom] : st.moments) adam_steps[name] = mom.t;
    header["state"] = {{"step", st.step},
                       {"pretrain_step", st.pretrain_step},
                       {"epoch", st.epoch},
                       {"pretrain_epoch", st.pretrain_epoch},
                       {"rng", st.rng_state()},
                       {"adam_steps", adam_steps},
                       {"history", detail::history_json(st.history)},
                       {"pretrain_history", detail::history_json(st.pretrain_history)}};
    const std::string hdr = header.dump();

    detail::ByteWriter w;
    w.bytes(std::string(kCheckpointMagic, sizeof kCheckpointMagic));
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint64_t>(hdr.size());
    w.bytes(hdr);

    std::size_t count = m.params().size();
    for (const auto& [name, mom] : st.moments)
        if (!mom.m.empty()) count += 2;
    w.put<std::uint64_t>(count);
    for (const Parameter* p : m.params().all()) w.tensor("param/" + p->name, p->value);
    for (const auto& [name, mom] : st.moments) {
        if (mom.m.empty()) continue;
        w.tensor("adam.m/" + name, mom.m);
        w.tensor("adam.v/" + name, mom.v);
    }
    const std::uint64_t sum = fnv1a64(w.buffer().data(), w.buffer().size());
    w.put<std::uint64_t>(sum);
    return std::move(w.buffer());
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
inline void save_checkpoint(const std::string& path, const Model& m, const TrainState& st) {
    const std::string bytes = serialize_checkpoint(m, st);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write checkpoint '" + path + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError("cannot write checkpoint '" + path + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot write checkpoint '" + path + "': " + ec.message());
}

struct LoadedCheckpoint {
    std::unique_ptr<Model> model;
    TrainState state;
};

/// Parses and validates everything before building the model; any problem
/// raises DataError and nothing partial is returned.
inline LoadedCheckpoint deserialize_checkpoint(const std::string& bytes, const std::string& source) {
    constexpr std::size_t kTrailer = sizeof(std::uint64_t);
    if (bytes.size() < sizeof kCheckpointMagic + 4 + 8 + kTrailer) throw DataError(source + ": truncated checkpoint");
    if (bytes.compare(0, sizeof kCheckpointMagic, kCheckpointMagic, sizeof kCheckpointMagic) != 0)
        throw DataError(source + ": not a checkpoint file");

    const std::size_t body = bytes.size() - kTrailer;
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body, kTrailer);

    detail::ByteReader r(bytes, body, source);
    r.bytes(sizeof kCheckpointMagic);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        r.fail("checkpoint version " + std::to_string(version) + " unsupported (expected " +
               std::to_string(kCheckpointVersion) + ")");
    }
    if (fnv1a64(bytes.data(), body) != stored) r.fail("checkpoint checksum mismatch (truncated or corrupt)");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(r.bytes(r.get<std::uint64_t>()));
    } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("bad checkpoint header: ") + e.what());
    }

    std::map<std::string, Tensor> tensors;
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        auto [name, t] = r.tensor();
        if (!tensors.emplace(name, std::move(t)).second) r.fail("duplicate tensor '" + name + "'");
    }
    if (r.pos() != body) r.fail("trailing bytes after tensors");

    LoadedCheckpoint out;
    try {
        ModelConfig cfg = header.at("config").get<ModelConfig>();
        Vocabulary vocab(header.at("vocab").get<std::vector<std::string>>());
        EntityTypes types(header.at("types").get<std::vector<std::string>>());
        auto model = std::make_unique<Model>(cfg, std::move(vocab), std::move(types));

        const auto& sj = header.at("state");
        TrainState st(cfg.seed);
        st.step = sj.at("step").get<std::size_t>();
        st.pretrain_step = sj.at("pretrain_step").get<std::size_t>();
        st.epoch = sj.at("epoch").get<std::size_t>();
        st.pretrain_epoch = sj.at("pretrain_epoch").get<std::size_t>();
        st.set_rng_state(sj.at("rng").get<std::string>());
        st.history = detail::history_from(sj.at("history"));
        st.pretrain_history = detail::history_from(sj.at("pretrain_history"));

        std::size_t used = 0;
        for (Parameter* p : model->params().all()) {
            auto it = tensors.find("param/" + p->name);
            if (it == tensors.end()) r.fail("missing tensor for parameter '" + p->name + "'");
            if (it->second.shape() != p->value.shape()) r.fail("shape mismatch for parameter '" + p->name + "'");
            p->value.storage() = it->second.storage();
            ++used;
        }
        for (const auto& [name, t] : sj.at("adam_steps").items()) {
            AdamMoments mom;
            mom.t = t.get<std::uint64_t>();
            auto m_it = tensors.find("adam.m/" + name);
            auto v_it = tensors.find("adam.v/" + name);
            if (m_it != tensors.end() && v_it != tensors.end()) {
                mom.m = m_it->second;
                mom.v = v_it->second;
                used += 2;
            }
            st.moments.emplace(name, std::move(mom));
        }
        if (used != tensors.size()) r.fail("checkpoint holds tensors the model does not use");
        out.model = std::move(model);
        out.state = std::move(st);
    } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("bad checkpoint header: ") + e.what());
    } catch (const UsageError& e) {
        r.fail(std::string("bad checkpoint config: ") + e.what());
    }
    return out;
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes, path);
}

}  // namespace ibner
