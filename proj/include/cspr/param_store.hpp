#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cspr/tensor.hpp"

namespace cspr::ad {

struct Init {
    enum class Kind { Zeros, Ones, Constant, XavierUniform, Normal };
    Kind kind = Kind::Zeros;
    real a = 0.0;  // Constant value / Normal sigma
    std::size_t fan_in = 0, fan_out = 0;

    static Init zeros() { return {Kind::Zeros, 0, 0, 0}; }
    static Init ones() { return {Kind::Ones, 0, 0, 0}; }
    static Init constant(real v) { return {Kind::Constant, v, 0, 0}; }
    static Init xavier(std::size_t fan_in, std::size_t fan_out) {
        return {Kind::XavierUniform, 0, fan_in, fan_out};
    }
    static Init normal(real sigma) { return {Kind::Normal, sigma, 0, 0}; }
};

// Ordered map of named tensors. Insertion order is the iteration order, and
// initialization consumes the store RNG in that order, so a (seed, creation
// sequence) pair fully determines every parameter value.
class ParamStore {
  public:
    explicit ParamStore(std::uint64_t rng_seed = 0);

    Tensor create(const std::string& name, Shape shape, const Init& init, bool trainable = true);
    // create() unless the name exists, in which case the existing tensor is
    // returned (shape-checked)
    Tensor get_or_create(const std::string& name, Shape shape, const Init& init, bool trainable = true);

    bool has(const std::string& name) const;
    Tensor get(const std::string& name) const;
    bool trainable(const std::string& name) const;

    const std::vector<std::string>& names() const { return order_; }
    std::vector<Tensor> trainable_tensors() const;
    std::size_t total_parameters() const;
    std::uint64_t rng_seed() const { return seed_; }

    void zero_grads();

    // Checkpoint format: magic "CLKP", u32 version, u32 entry count, then per
    // entry u16 name length, name, u8 rank, u32 dims..., f32 data...; CRC32.
    void save(const std::string& path) const;
    // Replaces the entry set wholesale; running-statistic names ("*.running_mean",
    // "*.running_var") load as non-trainable, everything else as trainable.
    static ParamStore load(const std::string& path);
    // Copies values into an existing store; every checkpoint entry must match
    // an existing entry in name and shape.
    void load_into(const std::string& path);

  private:
    struct Entry {
        Tensor t;
        bool trainable = true;
    };
    const Entry& entry(const std::string& name) const;

    std::uint64_t seed_;
    Rng rng_;
    std::vector<std::string> order_;
    std::unordered_map<std::string, Entry> map_;
};

}  // namespace cspr::ad
