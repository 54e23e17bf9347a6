#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dsanet/rng.hpp"
#include "dsanet/tensor.hpp"

namespace dsanet {

enum class Init { Zeros, Ones, KaimingUniform, Normal0p02 };

struct InitSpec {
    Init kind = Init::Zeros;
    std::uint64_t seed = 0;
    std::int64_t fan_in = 1;
};

template <typename T>
struct Parameter {
    Tensor<T> tensor;
    std::string name;
    InitSpec init;
};

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// Owns every learnable tensor of a model. Names are hierarchical and unique;
// the per-parameter seed is derived from the store seed and the name, so
// re-initialization reproduces values bitwise regardless of registration order.
template <typename T>
class ParameterStore {
public:
    explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

    Tensor<T> add(const std::string& name, Shape shape, Init kind, std::int64_t fan_in = 1) {
        DSANET_CHECK(!index_.count(name), UsageError, "duplicate parameter name: ", name);
        Parameter<T> p;
        p.name = name;
        p.init = InitSpec{kind, Rng::derive(seed_, fnv1a(name)), fan_in};
        p.tensor = Tensor<T>::zeros(std::move(shape), true);
        params_.push_back(std::move(p));
        index_[name] = params_.size() - 1;
        reinit(params_.back());
        return params_.back().tensor;
    }

    static void reinit(Parameter<T>& p) {
        Rng rng(p.init.seed);
        auto& v = p.tensor.values();
        switch (p.init.kind) {
            case Init::Zeros:
                std::fill(v.begin(), v.end(), T(0));
                break;
            case Init::Ones:
                std::fill(v.begin(), v.end(), T(1));
                break;
            case Init::KaimingUniform: {
                const double bound = std::sqrt(6.0 / static_cast<double>(p.init.fan_in));
                for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
                break;
            }
            case Init::Normal0p02:
                for (auto& x : v) x = static_cast<T>(rng.normal(0.0, 0.02));
                break;
        }
    }

    std::size_t size() const { return params_.size(); }
    Parameter<T>& at(std::size_t i) { return params_[i]; }
    const Parameter<T>& at(std::size_t i) const { return params_[i]; }
    std::vector<Parameter<T>>& all() { return params_; }
    const std::vector<Parameter<T>>& all() const { return params_; }

    Parameter<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }

    void zero_grads() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    std::int64_t total_scalars() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::vector<Parameter<T>> params_;
    std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// checkpoint container: magic "DSAW", then little-endian fields as documented
// in the README (u32 version, u32 count, then per parameter u32 name length,
// name bytes, u8 dtype tag, u8 rank, u64 dims, raw scalars).
// ---------------------------------------------------------------------------

namespace ckpt_detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

template <typename T>
void put_scalars(std::ostream& os, const std::vector<T>& v) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    for (T x : v) {
        if constexpr (sizeof(T) == 4) {
            std::uint32_t bits;
            std::memcpy(&bits, &x, 4);
            put_u32(os, bits);
        } else {
            std::uint64_t bits;
            std::memcpy(&bits, &x, 8);
            put_u64(os, bits);
        }
    }
}

template <typename T>
void get_scalars(std::istream& is, std::vector<T>& v) {
    for (T& x : v) {
        if constexpr (sizeof(T) == 4) {
            std::uint32_t bits = get_u32(is);
            std::memcpy(&x, &bits, 4);
        } else {
            std::uint64_t bits = get_u64(is);
            std::memcpy(&x, &bits, 8);
        }
    }
}

}  // namespace ckpt_detail

inline constexpr char kCheckpointMagic[4] = {'D', 'S', 'A', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const ParameterStore<T>& store, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    DSANET_CHECK(os.good(), IoError, "cannot open checkpoint for writing: ", path);
    os.write(kCheckpointMagic, 4);
    ckpt_detail::put_u32(os, kCheckpointVersion);
    ckpt_detail::put_u32(os, static_cast<std::uint32_t>(store.size()));
    for (const auto& p : store.all()) {
        ckpt_detail::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        os.put(sizeof(T) == 4 ? '\0' : '\1');
        os.put(static_cast<char>(p.tensor.rank()));
        for (auto d : p.tensor.shape()) ckpt_detail::put_u64(os, static_cast<std::uint64_t>(d));
        ckpt_detail::put_scalars(os, p.tensor.values());
    }
    DSANET_CHECK(os.good(), IoError, "write failure on checkpoint: ", path);
}

template <typename T>
void load_checkpoint(ParameterStore<T>& store, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    DSANET_CHECK(is.good(), IoError, "cannot open checkpoint: ", path);
    char magic[4];
    is.read(magic, 4);
    DSANET_CHECK(is.good() && std::memcmp(magic, kCheckpointMagic, 4) == 0, FormatError,
                 "not a checkpoint file: ", path);
    const std::uint32_t version = ckpt_detail::get_u32(is);
    DSANET_CHECK(version == kCheckpointVersion, FormatError, "unsupported checkpoint version ",
                 version);
    const std::uint32_t count = ckpt_detail::get_u32(is);
    std::size_t applied = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = ckpt_detail::get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const int dtype = is.get();
        const int rank = is.get();
        DSANET_CHECK(is.good() && rank >= 0, FormatError, "truncated checkpoint: ", path);
        Shape shape(static_cast<std::size_t>(rank));
        for (auto& d : shape) d = static_cast<std::int64_t>(ckpt_detail::get_u64(is));
        const int expect_dtype = sizeof(T) == 4 ? 0 : 1;
        DSANET_CHECK(dtype == expect_dtype, ConfigError, "checkpoint parameter ", name,
                     " has dtype tag ", dtype, " but the model runs with tag ", expect_dtype);
        Parameter<T>* p = store.find(name);
        DSANET_CHECK(p != nullptr, ConfigError, "checkpoint parameter ", name,
                     " does not exist in this model");
        DSANET_CHECK(p->tensor.shape() == shape, ConfigError, "checkpoint parameter ", name,
                     " has dims ", shape_str(shape), " but the model expects ",
                     shape_str(p->tensor.shape()));
        ckpt_detail::get_scalars(is, p->tensor.values());
        DSANET_CHECK(is.good(), FormatError, "truncated checkpoint data for ", name);
        ++applied;
    }
    DSANET_CHECK(applied == store.size(), ConfigError, "checkpoint holds ", applied,
                 " parameters but the model has ", store.size());
}

}  // namespace dsanet
