#include "cspr/param_store.hpp"

#include <cmath>

namespace cspr::ad {

namespace {
constexpr char kMagic[4] = {'C', 'L', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

bool is_running_stat(const std::string& name) {
    auto ends_with = [&](const char* suf) {
        const std::size_t n = std::string(suf).size();
        return name.size() >= n && name.compare(name.size() - n, n, suf) == 0;
    };
    return ends_with(".running_mean") || ends_with(".running_var");
}
}  // namespace

ParamStore::ParamStore(std::uint64_t rng_seed) : seed_(rng_seed), rng_(rng_seed) {}

Tensor ParamStore::create(const std::string& name, Shape shape, const Init& init, bool trainable) {
    if (map_.count(name)) throw ContractError("param already exists: " + name);
    const std::size_t n = shape_numel(shape);
    std::vector<real> v(n);
    switch (init.kind) {
        case Init::Kind::Zeros:
            break;
        case Init::Kind::Ones:
            std::fill(v.begin(), v.end(), 1.0);
            break;
        case Init::Kind::Constant:
            std::fill(v.begin(), v.end(), init.a);
            break;
        case Init::Kind::XavierUniform: {
            const real a = std::sqrt(6.0 / static_cast<real>(init.fan_in + init.fan_out));
            for (real& x : v) x = rng_.uniform(-a, a);
            break;
        }
        case Init::Kind::Normal:
            for (real& x : v) x = rng_.normal(0.0, init.a);
            break;
    }
    Tensor t = Tensor::from(std::move(shape), std::move(v), trainable);
    order_.push_back(name);
    map_.emplace(name, Entry{t, trainable});
    return t;
}

Tensor ParamStore::get_or_create(const std::string& name, Shape shape, const Init& init, bool trainable) {
    auto it = map_.find(name);
    if (it == map_.end()) return create(name, std::move(shape), init, trainable);
    if (it->second.t.shape() != shape)
        throw ShapeError("param " + name + " exists with shape " + shape_str(it->second.t.shape()) +
                         ", requested " + shape_str(shape));
    return it->second.t;
}

bool ParamStore::has(const std::string& name) const {
    return map_.count(name) != 0;
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ContractError("unknown param: " + name);
    return it->second;
}

Tensor ParamStore::get(const std::string& name) const {
    return entry(name).t;
}

bool ParamStore::trainable(const std::string& name) const {
    return entry(name).trainable;
}

std::vector<Tensor> ParamStore::trainable_tensors() const {
    std::vector<Tensor> out;
    for (const auto& n : order_) {
        const Entry& e = entry(n);
        if (e.trainable) out.push_back(e.t);
    }
    return out;
}

std::size_t ParamStore::total_parameters() const {
    std::size_t n = 0;
    for (const auto& name : order_) n += entry(name).t.size();
    return n;
}

void ParamStore::zero_grads() {
    for (const auto& name : order_) {
        auto it = map_.find(name);
        it->second.t.zero_grad();
    }
}

void ParamStore::save(const std::string& path) const {
    BinWriter w;
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(order_.size()));
    for (const auto& name : order_) {
        const Tensor& t = entry(name).t;
        if (name.size() > 0xFFFF) throw ContractError("param name too long: " + name);
        if (t.rank() > 0xFF) throw ContractError("param rank too large: " + name);
        w.u16(static_cast<std::uint16_t>(name.size()));
        w.str(name);
        w.u8(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        for (std::size_t i = 0; i < t.size(); ++i) w.f32(static_cast<float>(t.at(i)));
    }
    w.finish_crc();
    w.write_file(path);
}

namespace {

struct RawEntry {
    std::string name;
    Shape shape;
    std::vector<real> data;
};

std::vector<RawEntry> read_entries(const std::string& path) {
    BinReader r = BinReader::from_file(path);
    r.check_crc("checkpoint " + path);
    if (r.str(4) != std::string(kMagic, 4)) throw FormatError("checkpoint " + path + ": bad magic");
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw FormatError("checkpoint " + path + ": unsupported version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    std::vector<RawEntry> out;
    out.reserve(count);
    for (std::uint32_t e = 0; e < count; ++e) {
        RawEntry re;
        const std::uint16_t name_len = r.u16();
        re.name = r.str(name_len);
        const std::uint8_t rank = r.u8();
        std::size_t n = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            const std::uint32_t dim = r.u32();
            re.shape.push_back(dim);
            n *= dim;
        }
        re.data.resize(n);
        for (std::size_t i = 0; i < n; ++i) re.data[i] = static_cast<real>(r.f32());
        if (!out.empty() && out.back().name == re.name)
            throw FormatError("checkpoint " + path + ": duplicate entry " + re.name);
        out.push_back(std::move(re));
    }
    return out;
}

}  // namespace

ParamStore ParamStore::load(const std::string& path) {
    ParamStore store(0);
    for (auto& re : read_entries(path)) {
        const bool trainable = !is_running_stat(re.name);
        Tensor t = Tensor::from(re.shape, std::move(re.data), trainable);
        store.order_.push_back(re.name);
        store.map_.emplace(re.name, Entry{t, trainable});
    }
    return store;
}

void ParamStore::load_into(const std::string& path) {
    for (auto& re : read_entries(path)) {
        auto it = map_.find(re.name);
        if (it == map_.end()) throw FormatError("checkpoint entry has no matching param: " + re.name);
        Tensor& t = it->second.t;
        if (t.shape() != re.shape)
            throw ShapeError("checkpoint entry " + re.name + " shape " + shape_str(re.shape) +
                             " does not match param shape " + shape_str(t.shape()));
        auto dst = t.mutable_data();
        std::copy(re.data.begin(), re.data.end(), dst.begin());
    }
}

}  // namespace cspr::ad
