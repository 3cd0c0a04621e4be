// SPDX-License-Identifier: Apache-2.0
//
// The deployable model bundle (frozen vision encoder, fusion decoder,
// vocabulary) and its binary checkpoint format:
//
//     "MAEMI01"
//     u64 metadata length, metadata JSON (UTF-8)
//     u32 tensor count
//     per tensor: u32 name length, name, u8 dtype, u32 ndim, u64 dims...,
//                 u64 payload bytes, payload
//
// All integers and payloads are little-endian. dtype: 0 = f32, 1 = f64,
// 2 = i8. A quantized base weight is stored as "<layer>.W0.q" (i8) plus
// "<layer>.W0.scales" (f32) instead of "<layer>.W0".
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "maemi/adapter.hpp"
#include "maemi/fusion.hpp"
#include "maemi/image.hpp"
#include "maemi/tokenizer.hpp"
#include "maemi/vision.hpp"

namespace maemi {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using nlohmann::json;

inline constexpr char kCheckpointMagic[] = "MAEMI01";
inline constexpr std::size_t kMagicLen = 7;

// ---------------------------------------------------------------------------
// Config <-> JSON

inline std::string to_string(AdapterMode m) { return m == AdapterMode::lora ? "lora" : "lora_fa"; }
inline std::string to_string(AlphaMode m) { return m == AlphaMode::fixed ? "fixed" : "one_over_rank"; }

inline AdapterMode parse_adapter_mode(const std::string& s) {
    if (s == "lora") return AdapterMode::lora;
    if (s == "lora_fa") return AdapterMode::lora_fa;
    fail(Errc::BadConfig, "unknown adapter mode '" + s + "' (lora|lora_fa)");
}

inline AlphaMode parse_alpha_mode(const std::string& s) {
    if (s == "fixed") return AlphaMode::fixed;
    if (s == "one_over_rank") return AlphaMode::one_over_rank;
    fail(Errc::BadConfig, "unknown alpha mode '" + s + "' (fixed|one_over_rank)");
}

inline json to_json(const VisionConfig& c) {
    return {{"image_size", c.image_size}, {"patch", c.patch}, {"dim", c.dim},
            {"layers", c.layers},         {"heads", c.heads}, {"ffn_hidden", c.ffn_hidden}};
}

inline json to_json(const FusionConfig& c) {
    return {{"d_model", c.d_model},       {"heads", c.heads},           {"head_dim", c.head_dim},
            {"blocks", c.blocks},         {"max_seq", c.max_seq},       {"ffn_hidden", c.ffn_hidden},
            {"vision_dim", c.vision_dim}, {"embed_std", c.embed_std},   {"pos_std", c.pos_std}};
}

inline json to_json(const AdapterConfig& c) {
    return {{"r_min", c.r_min},   {"r_max", c.r_max},
            {"mode", to_string(c.mode)}, {"alpha_mode", to_string(c.alpha_mode)},
            {"alpha", c.alpha},   {"dropout", c.dropout}};
}

inline VisionConfig vision_config_from_json(const json& j) {
    VisionConfig c;
    c.image_size = j.at("image_size");
    c.patch = j.at("patch");
    c.dim = j.at("dim");
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.ffn_hidden = j.at("ffn_hidden");
    return c;
}

inline FusionConfig fusion_config_from_json(const json& j) {
    FusionConfig c;
    c.d_model = j.at("d_model");
    c.heads = j.at("heads");
    c.head_dim = j.at("head_dim");
    c.blocks = j.at("blocks");
    c.max_seq = j.at("max_seq");
    c.ffn_hidden = j.at("ffn_hidden");
    c.vision_dim = j.at("vision_dim");
    c.embed_std = j.at("embed_std");
    c.pos_std = j.at("pos_std");
    return c;
}

inline AdapterConfig adapter_config_from_json(const json& j) {
    AdapterConfig c;
    c.r_min = j.at("r_min");
    c.r_max = j.at("r_max");
    c.mode = parse_adapter_mode(j.at("mode"));
    c.alpha_mode = parse_alpha_mode(j.at("alpha_mode"));
    c.alpha = j.at("alpha");
    c.dropout = j.at("dropout");
    return c;
}

// ---------------------------------------------------------------------------

/// Everything needed to caption, answer and classify from an image file.
template <class T>
struct CaptionModel {
    VisionConfig vision_cfg;
    FusionConfig fusion_cfg;
    AdapterConfig adapter_cfg;
    VisionEncoder<T> encoder;
    FusionModel<T> fusion;
    Vocabulary vocab;
    json meta = json::object();  // epoch, metrics history, training config

    static CaptionModel init(const VisionConfig& vc, FusionConfig fc, const AdapterConfig& ac, Vocabulary vocab,
                             std::uint64_t seed) {
        CaptionModel m;
        fc.vision_dim = vc.dim;
        m.vision_cfg = vc;
        m.fusion_cfg = fc;
        m.adapter_cfg = ac;
        Prng vision_rng = Prng(seed).fork(1);
        Prng fusion_rng = Prng(seed).fork(2);
        m.encoder = VisionEncoder<T>::init(vc, vision_rng);
        m.fusion = FusionModel<T>::init(fc, ac, vocab.size(), fusion_rng);
        m.vocab = std::move(vocab);
        return m;
    }

    Tensor<T> vision_states(const RawImage& raw) const { return encode_image(encoder, raw).states; }
    Tensor<T> vision_states(const std::filesystem::path& image) const { return vision_states(load_image(image)); }
};

/// Visits every dense tensor of the bundle by checkpoint name. Adapter base
/// weights are reported through `on_base` so quantized storage can diverge.
template <class T, class Model, class F, class G>
void visit_checkpoint_tensors(Model& m, F&& on_tensor, G&& on_base) {
    auto& enc = m.encoder;
    on_tensor("vision.patch_proj", enc.patch_proj().mutable_weight());
    on_tensor("vision.cls", enc.cls());
    on_tensor("vision.pos", enc.pos());
    on_tensor("vision.final_gain", enc.final_gain());
    for (std::size_t l = 0; l < enc.layers().size(); ++l) {
        auto& L = enc.layers()[l];
        const std::string p = "vision.layer" + std::to_string(l) + ".";
        on_tensor(p + "local_gain", L.local_gain);
        on_tensor(p + "global_gain", L.global_gain);
        on_tensor(p + "ffn_gain", L.ffn_gain);
        for (auto [tag, attn] : {std::pair{"local.", &L.local}, std::pair{"global.", &L.global}}) {
            on_tensor(p + tag + "wq", attn->wq().mutable_weight());
            on_tensor(p + tag + "wk", attn->wk().mutable_weight());
            on_tensor(p + tag + "wv", attn->wv().mutable_weight());
            on_tensor(p + tag + "wo", attn->wo().mutable_weight());
        }
        on_tensor(p + "ffn.up", L.ffn.up().mutable_weight());
        on_tensor(p + "ffn.down", L.ffn.down().mutable_weight());
    }
    auto& f = m.fusion;
    on_tensor("embed", f.embed());
    on_tensor("pos", f.pos());
    on_tensor("final_gain", f.final_gain());
    for (std::size_t b = 0; b < f.blocks().size(); ++b) {
        auto& blk = f.blocks()[b];
        const std::string p = "block" + std::to_string(b) + ".";
        on_tensor(p + "cross_gain", blk.cross_gain);
        on_tensor(p + "self_gain", blk.self_gain);
        on_tensor(p + "ffn_gain", blk.ffn_gain);
    }
    f.for_each_adapter([&](const std::string& name, AdapterLinear<T>& a) {
        on_base(name, a);
        on_tensor(name + ".A", a.mutable_A());
        on_tensor(name + ".B", a.mutable_B());
    });
}

namespace detail {

template <class T>
constexpr std::uint8_t dtype_code() {
    if constexpr (std::is_same_v<T, float>) return 0;
    else if constexpr (std::is_same_v<T, double>) return 1;
    else return 2;
}

class ByteWriter {
  public:
    template <class U>
    void put(U v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(U));
    }
    void put_bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    void put_string(const std::string& s) { put_bytes(s.data(), s.size()); }

    std::vector<std::uint8_t> bytes;
};

class ByteReader {
  public:
    explicit ByteReader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

    template <class U>
    U get() {
        need(sizeof(U));
        U v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;
    }
    const std::uint8_t* take(std::size_t n) {
        need(n);
        const auto* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    bool done() const noexcept { return pos_ == bytes_.size(); }

  private:
    void need(std::size_t n) const {
        if (n > bytes_.size() - pos_) fail(Errc::IoError, "checkpoint truncated at byte " + std::to_string(pos_));
    }
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

struct RawTensor {
    std::uint8_t dtype = 0;
    Shape shape;
    const std::uint8_t* payload = nullptr;
    std::size_t bytes = 0;
};

template <class T>
void write_tensor(ByteWriter& w, const std::string& name, const Shape& shape, const T* data, std::size_t n) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_string(name);
    w.put<std::uint8_t>(dtype_code<T>());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) w.put<std::uint64_t>(d);
    w.put<std::uint64_t>(n * sizeof(T));
    w.put_bytes(data, n * sizeof(T));
}

template <class T>
Tensor<T> decode_tensor(const std::string& name, const RawTensor& raw, const Shape& expected) {
    if (raw.shape != expected)
        fail(Errc::ShapeMismatchOnLoad,
             "tensor '" + name + "' has shape " + shape_str(raw.shape) + ", model expects " + shape_str(expected));
    const std::size_t n = shape_numel(expected);
    Tensor<T> t(expected);
    if (raw.dtype == 0) {
        if (raw.bytes != n * 4) fail(Errc::IoError, "tensor '" + name + "' payload size");
        for (std::size_t i = 0; i < n; ++i) {
            float v;
            std::memcpy(&v, raw.payload + 4 * i, 4);
            t[i] = static_cast<T>(v);
        }
    } else if (raw.dtype == 1) {
        if (raw.bytes != n * 8) fail(Errc::IoError, "tensor '" + name + "' payload size");
        for (std::size_t i = 0; i < n; ++i) {
            double v;
            std::memcpy(&v, raw.payload + 8 * i, 8);
            t[i] = static_cast<T>(v);
        }
    } else {
        fail(Errc::IoError, "tensor '" + name + "' has unexpected dtype " + std::to_string(raw.dtype));
    }
    return t;
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> serialize_checkpoint(CaptionModel<T>& m) {
    json meta = m.meta;
    meta["vision"] = to_json(m.vision_cfg);
    meta["fusion"] = to_json(m.fusion_cfg);
    meta["adapter"] = to_json(m.adapter_cfg);
    meta["vocab"] = m.vocab.tokens();
    meta["vocab_hash"] = m.vocab.hash();
    meta["dtype"] = detail::dtype_code<T>() == 0 ? "f32" : "f64";
    std::map<std::string, T> gates;
    m.fusion.for_each_gate([&](const std::string& name, ScalarParam<T>& g) { gates[name] = g.value(); });

    detail::ByteWriter body;
    std::uint32_t count = 0;
    auto on_tensor = [&](const std::string& name, Tensor<T>& t) {
        detail::write_tensor(body, name, t.shape(), t.data(), t.size());
        ++count;
    };
    auto on_base = [&](const std::string& name, AdapterLinear<T>& a) {
        if (const auto& q = a.quantized()) {
            detail::write_tensor(body, name + ".W0.q", Shape{q->rows, q->cols}, q->q.data(), q->q.size());
            detail::write_tensor(body, name + ".W0.scales", Shape{q->cols}, q->scales.data(), q->scales.size());
            count += 2;
        } else {
            on_tensor(name + ".W0", const_cast<Tensor<T>&>(a.base()));
        }
    };
    visit_checkpoint_tensors<T>(m, on_tensor, on_base);
    for (auto& [name, v] : gates) {
        detail::write_tensor(body, name, Shape{1}, &v, 1);
        ++count;
    }

    detail::ByteWriter out;
    out.put_bytes(kCheckpointMagic, kMagicLen);
    const std::string meta_text = meta.dump();
    out.put<std::uint64_t>(meta_text.size());
    out.put_string(meta_text);
    out.put<std::uint32_t>(count);
    out.bytes.insert(out.bytes.end(), body.bytes.begin(), body.bytes.end());
    return std::move(out.bytes);
}

template <class T>
CaptionModel<T> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < kMagicLen || std::memcmp(bytes.data(), kCheckpointMagic, kMagicLen) != 0)
        fail(Errc::BadMagic, "not a MAEMI01 checkpoint");
    detail::ByteReader r(bytes);
    r.take(kMagicLen);
    const auto meta_len = r.get<std::uint64_t>();
    const auto* meta_ptr = r.take(meta_len);
    json meta;
    try {
        meta = json::parse(std::string(reinterpret_cast<const char*>(meta_ptr), meta_len));
    } catch (const json::exception& e) {
        fail(Errc::IoError, std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }

    std::map<std::string, detail::RawTensor> raw;
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.get<std::uint32_t>();
        const auto* name_ptr = r.take(name_len);
        std::string name(reinterpret_cast<const char*>(name_ptr), name_len);
        detail::RawTensor t;
        t.dtype = r.get<std::uint8_t>();
        const auto ndim = r.get<std::uint32_t>();
        if (ndim > 8) fail(Errc::IoError, "tensor '" + name + "' claims " + std::to_string(ndim) + " dims");
        for (std::uint32_t d = 0; d < ndim; ++d) t.shape.push_back(r.get<std::uint64_t>());
        t.bytes = r.get<std::uint64_t>();
        t.payload = r.take(t.bytes);
        raw.emplace(std::move(name), t);
    }
    if (!r.done()) fail(Errc::IoError, "trailing bytes after the last checkpoint tensor");

    CaptionModel<T> m;
    try {
        std::vector<std::string> tokens = meta.at("vocab");
        std::string text;
        for (std::size_t i = 0; i < tokens.size(); ++i) text += tokens[i] + "\t" + std::to_string(i) + "\n";
        Vocabulary vocab = Vocabulary::parse(text);
        if (vocab.hash() != meta.at("vocab_hash").get<std::uint64_t>())
            fail(Errc::IoError, "vocabulary hash mismatch in checkpoint metadata");
        m = CaptionModel<T>::init(vision_config_from_json(meta.at("vision")), fusion_config_from_json(meta.at("fusion")),
                                  adapter_config_from_json(meta.at("adapter")), std::move(vocab), 0);
    } catch (const json::exception& e) {
        fail(Errc::IoError, std::string("checkpoint metadata incomplete: ") + e.what());
    }
    for (const char* k : {"vision", "fusion", "adapter", "vocab", "vocab_hash", "dtype"}) meta.erase(k);
    m.meta = std::move(meta);

    auto find = [&](const std::string& name) -> const detail::RawTensor& {
        auto it = raw.find(name);
        if (it == raw.end()) fail(Errc::ShapeMismatchOnLoad, "checkpoint lacks tensor '" + name + "'");
        return it->second;
    };
    std::size_t used = 0;
    auto on_tensor = [&](const std::string& name, Tensor<T>& t) {
        t = detail::decode_tensor<T>(name, find(name), t.shape());
        ++used;
    };
    auto on_base = [&](const std::string& name, AdapterLinear<T>& a) {
        if (raw.count(name + ".W0.q")) {
            const auto& q = find(name + ".W0.q");
            const auto& s = find(name + ".W0.scales");
            if (q.dtype != 2 || s.dtype != 0) fail(Errc::IoError, "quantized tensor '" + name + "' has wrong dtypes");
            if (q.shape != Shape{a.d_in(), a.d_out()} || s.shape != Shape{a.d_out()})
                fail(Errc::ShapeMismatchOnLoad, "quantized tensor '" + name + "' shape");
            if (q.bytes != a.d_in() * a.d_out() || s.bytes != 4 * a.d_out())
                fail(Errc::IoError, "quantized tensor '" + name + "' payload size");
            QuantizedMatrix qm;
            qm.rows = a.d_in();
            qm.cols = a.d_out();
            qm.q.resize(q.bytes);
            std::memcpy(qm.q.data(), q.payload, q.bytes);
            qm.scales.resize(a.d_out());
            std::memcpy(qm.scales.data(), s.payload, s.bytes);
            a.set_quantized_base(std::move(qm));
            used += 2;
        } else {
            Tensor<T>& w = a.mutable_base();
            w = detail::decode_tensor<T>(name + ".W0", find(name + ".W0"), w.shape());
            ++used;
        }
    };
    visit_checkpoint_tensors<T>(m, on_tensor, on_base);
    m.fusion.for_each_gate([&](const std::string& name, ScalarParam<T>& g) {
        g.set(detail::decode_tensor<T>(name, find(name), Shape{1})[0]);
        ++used;
    });
    if (used != raw.size()) fail(Errc::ShapeMismatchOnLoad, "checkpoint holds tensors this model does not have");
    return m;
}

template <class T>
void save_checkpoint(CaptionModel<T>& m, const std::filesystem::path& path) {
    detail::write_file_bytes(path, serialize_checkpoint(m));
}

template <class T>
CaptionModel<T> load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint<T>(detail::read_file_bytes(path));
}

/// Sum of stored W0 payload bytes (int8 + scales when quantized).
template <class T>
std::size_t base_payload_bytes(CaptionModel<T>& m) {
    std::size_t n = 0;
    m.fusion.for_each_adapter([&](const std::string&, AdapterLinear<T>& a) {
        n += a.quantized() ? a.quantized()->payload_bytes() : a.base().size() * sizeof(T);
    });
    return n;
}

}  // namespace maemi
