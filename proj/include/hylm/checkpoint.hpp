#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "hylm/meta_tokens.hpp"
#include "hylm/model.hpp"

namespace hylm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container is little-endian; big-endian hosts are unsupported");

// Container layout (all integers little-endian):
//   magic "HYLM", u32 version, u64 config_len + bytes (canonical config text),
//   u64 meta_len + bytes (free-form text), u32 blob_count, then per blob:
//   u64 name_len + bytes, u8 dtype (0=f32 1=f64 2=i64 3=u8),
//   u32 rank, u64 dims[rank], u64 byte_len + raw data.
enum class BlobType : std::uint8_t { F32 = 0, F64 = 1, I64 = 2, U8 = 3 };

struct Blob {
    std::string name;
    BlobType dtype = BlobType::F64;
    std::vector<std::uint64_t> dims;
    std::vector<unsigned char> raw;

    std::size_t elem_size() const {
        switch (dtype) {
            case BlobType::F32: return 4;
            case BlobType::F64: return 8;
            case BlobType::I64: return 8;
            case BlobType::U8: return 1;
        }
        return 0;
    }
};

struct Container {
    std::uint32_t version = 1;
    std::string config_text;
    std::string meta_text;
    std::vector<Blob> blobs;

    const Blob* find(const std::string& name) const {
        for (const auto& b : blobs) {
            if (b.name == name) {
                return &b;
            }
        }
        return nullptr;
    }
};

namespace detail {

template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) {
        throw IoError("checkpoint: truncated file");
    }
    return v;
}

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline std::string read_string(std::istream& is) {
    const auto n = read_pod<std::uint64_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) {
        throw IoError("checkpoint: truncated string");
    }
    return s;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_pod<std::uint64_t>(os, s.size());
    write_bytes(os, s.data(), s.size());
}

} // namespace detail

inline void write_container(const std::string& path, const Container& c) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    os.write("HYLM", 4);
    detail::write_pod<std::uint32_t>(os, c.version);
    detail::write_string(os, c.config_text);
    detail::write_string(os, c.meta_text);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.blobs.size()));
    for (const auto& b : c.blobs) {
        detail::write_string(os, b.name);
        detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(b.dtype));
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(b.dims.size()));
        for (auto d : b.dims) {
            detail::write_pod<std::uint64_t>(os, d);
        }
        detail::write_pod<std::uint64_t>(os, b.raw.size());
        detail::write_bytes(os, b.raw.data(), b.raw.size());
    }
    if (!os) {
        throw IoError("write failed for '" + path + "'");
    }
}

inline Container read_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open '" + path + "'");
    }
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "HYLM", 4) != 0) {
        throw IoError("'" + path + "' is not a checkpoint container");
    }
    Container c;
    c.version = detail::read_pod<std::uint32_t>(is);
    if (c.version != 1) {
        throw IoError("unsupported checkpoint version " + std::to_string(c.version));
    }
    c.config_text = detail::read_string(is);
    c.meta_text = detail::read_string(is);
    const auto count = detail::read_pod<std::uint32_t>(is);
    c.blobs.resize(count);
    for (auto& b : c.blobs) {
        b.name = detail::read_string(is);
        b.dtype = static_cast<BlobType>(detail::read_pod<std::uint8_t>(is));
        const auto rank = detail::read_pod<std::uint32_t>(is);
        b.dims.resize(rank);
        for (auto& d : b.dims) {
            d = detail::read_pod<std::uint64_t>(is);
        }
        const auto len = detail::read_pod<std::uint64_t>(is);
        b.raw.resize(len);
        is.read(reinterpret_cast<char*>(b.raw.data()), static_cast<std::streamsize>(len));
        if (!is) {
            throw IoError("checkpoint: truncated blob '" + b.name + "'");
        }
    }
    return c;
}

// ---------------------------------------------------------------------------
// Model <-> container
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
Blob tensor_blob(const std::string& name, const Tensor<Real>& t) {
    Blob b;
    b.name = name;
    b.dtype = sizeof(Real) == 4 ? BlobType::F32 : BlobType::F64;
    for (auto d : t.shape()) {
        b.dims.push_back(d);
    }
    b.raw.resize(t.size() * sizeof(Real));
    std::memcpy(b.raw.data(), t.value().data(), b.raw.size());
    return b;
}

template <class Real>
Blob vector_blob(const std::string& name, const std::vector<Real>& v,
                 std::vector<std::uint64_t> dims) {
    Blob b;
    b.name = name;
    b.dtype = sizeof(Real) == 4 ? BlobType::F32 : BlobType::F64;
    b.dims = std::move(dims);
    b.raw.resize(v.size() * sizeof(Real));
    std::memcpy(b.raw.data(), v.data(), b.raw.size());
    return b;
}

inline Blob i64_blob(const std::string& name, const std::vector<std::int64_t>& v) {
    Blob b;
    b.name = name;
    b.dtype = BlobType::I64;
    b.dims = {v.size()};
    b.raw.resize(v.size() * 8);
    std::memcpy(b.raw.data(), v.data(), b.raw.size());
    return b;
}

inline Blob u8_blob(const std::string& name, const std::vector<std::uint8_t>& v) {
    Blob b;
    b.name = name;
    b.dtype = BlobType::U8;
    b.dims = {v.size()};
    b.raw.assign(v.begin(), v.end());
    return b;
}

// Numeric blob payload as the requested Real, converting f32<->f64 as needed.
template <class Real>
std::vector<Real> blob_values(const Blob& b) {
    std::vector<Real> out;
    if (b.dtype == BlobType::F32) {
        out.resize(b.raw.size() / 4);
        const float* p = reinterpret_cast<const float*>(b.raw.data());
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = static_cast<Real>(p[i]);
        }
    } else if (b.dtype == BlobType::F64) {
        out.resize(b.raw.size() / 8);
        const double* p = reinterpret_cast<const double*>(b.raw.data());
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = static_cast<Real>(p[i]);
        }
    } else {
        throw IoError("blob '" + b.name + "' is not floating point");
    }
    return out;
}

} // namespace detail

template <class Real>
Container model_to_container(const Model<Real>& model, std::string meta_text = {}) {
    Container c;
    c.config_text = config_to_text(model.cfg);
    c.meta_text = std::move(meta_text);
    for (const auto& [name, t] : model.parameters()) {
        c.blobs.push_back(detail::tensor_blob("param/" + name, t));
    }
    return c;
}

template <class Real>
Model<Real> model_from_container(const Container& c) {
    auto cfg = config_from_text(c.config_text);
    auto model = build_model<Real>(cfg, 0);
    for (auto& [name, t] : model.parameters()) {
        const Blob* b = c.find("param/" + name);
        if (!b) {
            throw IoError("checkpoint is missing parameter '" + name + "'");
        }
        auto vals = detail::blob_values<Real>(*b);
        if (vals.size() != t.size()) {
            throw IoError("checkpoint parameter '" + name + "' has wrong size");
        }
        auto dst = const_cast<Tensor<Real>&>(t).value_mut();
        std::copy(vals.begin(), vals.end(), dst.begin());
    }
    return model;
}

template <class Real>
void save_checkpoint(const std::string& path, const Model<Real>& model,
                     std::string meta_text = {}) {
    write_container(path, model_to_container(model, std::move(meta_text)));
}

template <class Real>
Model<Real> load_checkpoint(const std::string& path) {
    return model_from_container<Real>(read_container(path));
}

// ---------------------------------------------------------------------------
// PrecomputedInit <-> container blobs
// ---------------------------------------------------------------------------

template <class Real>
void append_init_blobs(Container& c, const PrecomputedInit<Real>& init) {
    c.blobs.push_back(detail::i64_blob(
        "init/fingerprint", {static_cast<std::int64_t>(init.fingerprint)}));
    c.blobs.push_back(detail::i64_blob(
        "init/next_position", {static_cast<std::int64_t>(init.cache.next_position)}));
    for (std::size_t g = 0; g < init.cache.groups.size(); ++g) {
        const auto& grp = init.cache.groups[g];
        const std::string p = "init/group" + std::to_string(g) + "/";
        c.blobs.push_back(detail::vector_blob(p + "k", grp.k_rows,
                                              {grp.row_count(), grp.k_width}));
        c.blobs.push_back(detail::vector_blob(p + "v", grp.v_rows,
                                              {grp.row_count(), grp.v_width}));
        std::vector<std::int64_t> pos(grp.positions.begin(), grp.positions.end());
        c.blobs.push_back(detail::i64_blob(p + "positions", pos));
        c.blobs.push_back(detail::u8_blob(p + "meta", grp.meta));
    }
    for (std::size_t l = 0; l < init.cache.ssm.size(); ++l) {
        const std::string p = "init/layer" + std::to_string(l) + "/";
        c.blobs.push_back(detail::vector_blob(p + "h", init.cache.ssm[l].h,
                                              {init.cache.ssm[l].h.size()}));
        c.blobs.push_back(detail::vector_blob(p + "conv_tail", init.cache.ssm[l].conv_tail,
                                              {init.cache.ssm[l].conv_tail.size()}));
    }
}

template <class Real>
PrecomputedInit<Real> init_from_container(const Container& c) {
    auto cfg = config_from_text(c.config_text);
    PrecomputedInit<Real> init(cfg);
    const Blob* fp = c.find("init/fingerprint");
    if (!fp) {
        throw IoError("container holds no precomputed init");
    }
    init.fingerprint =
        static_cast<std::uint64_t>(reinterpret_cast<const std::int64_t*>(fp->raw.data())[0]);
    init.cache.param_fingerprint = init.fingerprint;
    init.cache.meta_consumed = true;
    const Blob* np = c.find("init/next_position");
    init.cache.next_position =
        np ? reinterpret_cast<const std::int64_t*>(np->raw.data())[0] : 0;
    for (std::size_t g = 0; g < init.cache.groups.size(); ++g) {
        auto& grp = init.cache.groups[g];
        const std::string p = "init/group" + std::to_string(g) + "/";
        const Blob* kb = c.find(p + "k");
        const Blob* vb = c.find(p + "v");
        const Blob* pb = c.find(p + "positions");
        const Blob* mb = c.find(p + "meta");
        if (!kb || !vb || !pb || !mb) {
            throw IoError("precomputed init is missing group " + std::to_string(g));
        }
        grp.k_rows = detail::blob_values<Real>(*kb);
        grp.v_rows = detail::blob_values<Real>(*vb);
        const auto* pp = reinterpret_cast<const std::int64_t*>(pb->raw.data());
        grp.positions.assign(pp, pp + pb->raw.size() / 8);
        grp.meta.assign(mb->raw.begin(), mb->raw.end());
        grp.next_position = init.cache.next_position;
    }
    for (std::size_t l = 0; l < init.cache.ssm.size(); ++l) {
        const std::string p = "init/layer" + std::to_string(l) + "/";
        const Blob* hb = c.find(p + "h");
        const Blob* tb = c.find(p + "conv_tail");
        if (!hb || !tb) {
            throw IoError("precomputed init is missing layer state " + std::to_string(l));
        }
        init.cache.ssm[l].h = detail::blob_values<Real>(*hb);
        init.cache.ssm[l].conv_tail = detail::blob_values<Real>(*tb);
    }
    return init;
}

} // namespace hylm
