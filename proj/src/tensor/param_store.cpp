#include "telldrive/tensor/param_store.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

#include "telldrive/errors.hpp"

namespace telldrive::tensor {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw UsageError("duplicate parameter name: " + name);
  value.set_requires_grad(true);
  AdamState state;
  state.m.assign(value.size(), 0.0);
  state.v.assign(value.size(), 0.0);
  entries_.push_back({name, std::move(value), std::move(state)});
  return entries_.back().value;
}

Tensor& ParamStore::add_weight(const std::string& name, std::size_t fan_in, std::size_t fan_out,
                               std::mt19937_64& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(fan_in * fan_out);
  for (auto& v : values) v = dist(rng);
  return add(name, Tensor({fan_in, fan_out}, std::move(values)));
}

Tensor& ParamStore::add_bias(const std::string& name, std::size_t size) {
  return add(name, Tensor::zeros({size}));
}

Tensor& ParamStore::get(const std::string& name) {
  for (auto& e : entries_)
    if (e.name == name) return e.value;
  throw UsageError("unknown parameter: " + name);
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.value;
  throw UsageError("unknown parameter: " + name);
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

void ParamStore::adam_step(const AdamOptions& o) {
  for (auto& e : entries_) {
    auto& st = e.adam;
    ++st.step;
    const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(st.step));
    auto w = e.value.data();
    auto g = e.value.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      st.m[i] = o.beta1 * st.m[i] + (1.0 - o.beta1) * g[i];
      st.v[i] = o.beta2 * st.v[i] + (1.0 - o.beta2) * g[i] * g[i];
      const double m_hat = st.m[i] / bc1;
      const double v_hat = st.v[i] / bc2;
      w[i] -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
    }
  }
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& e : entries_) {
    out.entries_.push_back({e.name, e.value.clone(true), e.adam});
  }
  return out;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  if (other.entries_.size() != entries_.size()) {
    throw UsageError("copy_values_from: parameter count mismatch");
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto& dst = entries_[i];
    const auto& src = other.entries_[i];
    if (dst.name != src.name || dst.value.shape() != src.value.shape()) {
      throw UsageError("copy_values_from: layout mismatch at " + dst.name);
    }
    std::copy(src.value.data().begin(), src.value.data().end(), dst.value.data().begin());
  }
}

// ---------------------------------------------------------------------------
// Checkpoint encoding

namespace {

constexpr char kMagic[4] = {'T', 'D', 'C', 'K'};

struct Record {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

class Writer {
 public:
  template <typename T>
  void put(T value) {
    char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    bytes_.insert(bytes_.end(), raw, raw + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    auto p = static_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  Reader(const std::vector<char>& bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  void get_bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == limit_; }

 private:
  void need(std::size_t n) {
    if (pos_ + n > limit_) throw CheckpointError("checkpoint truncated");
  }
  const std::vector<char>& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const char* data, std::size_t n) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

std::vector<Record> to_records(const ParamStore& params) {
  std::vector<Record> out;
  for (const auto& e : params.entries()) {
    out.push_back({e.name, e.value.shape(), {e.value.data().begin(), e.value.data().end()}});
  }
  for (const auto& e : params.entries()) {
    out.push_back({e.name + "@adam.m", e.value.shape(), e.adam.m});
    out.push_back({e.name + "@adam.v", e.value.shape(), e.adam.v});
    out.push_back({e.name + "@adam.step", {1}, {static_cast<double>(e.adam.step)}});
  }
  return out;
}

struct Decoded {
  std::uint64_t arch_hash = 0;
  std::vector<Record> records;
};

Decoded decode(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kMagic) + 4 + 8 + 4 + 4) {
    throw CheckpointError("checkpoint too short: " + path.string());
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + body, 4);
  if (crc_of(bytes.data(), body) != stored_crc) {
    throw CheckpointError("checkpoint CRC32 mismatch (file corrupt): " + path.string());
  }
  Reader r(bytes, body);
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("bad checkpoint magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointSchemaVersion) {
    throw CheckpointError("unsupported checkpoint schema version " + std::to_string(version));
  }
  Decoded out;
  out.arch_hash = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    Record rec;
    const auto name_len = r.get<std::uint32_t>();
    rec.name.resize(name_len);
    r.get_bytes(rec.name.data(), name_len);
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < rank; ++d) rec.shape.push_back(r.get<std::uint64_t>());
    rec.data.resize(numel(rec.shape));
    r.get_bytes(rec.data.data(), rec.data.size() * sizeof(double));
    out.records.push_back(std::move(rec));
  }
  if (!r.done()) throw CheckpointError("trailing bytes in checkpoint");
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     std::uint64_t arch_hash) {
  const auto records = to_records(params);
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointSchemaVersion);
  w.put<std::uint64_t>(arch_hash);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(records.size()));
  for (const auto& rec : records) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(rec.name.size()));
    w.put_bytes(rec.name.data(), rec.name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(rec.shape.size()));
    for (auto d : rec.shape) w.put<std::uint64_t>(d);
    w.put_bytes(rec.data.data(), rec.data.size() * sizeof(double));
  }
  const auto crc = crc_of(w.bytes().data(), w.bytes().size());
  w.put<std::uint32_t>(crc);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
}

void load_checkpoint(const std::filesystem::path& path, ParamStore& params,
                     std::uint64_t expected_arch_hash) {
  auto decoded = decode(path);
  if (decoded.arch_hash != expected_arch_hash) {
    throw CheckpointError("checkpoint architecture hash mismatch: file has " +
                          std::to_string(decoded.arch_hash) + ", network expects " +
                          std::to_string(expected_arch_hash));
  }
  std::unordered_map<std::string, const Record*> by_name;
  for (const auto& rec : decoded.records) by_name[rec.name] = &rec;
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Record& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint missing record " + name);
    if (it->second->shape != shape) {
      throw CheckpointError("checkpoint record " + name + " has shape " +
                            shape_str(it->second->shape) + ", expected " + shape_str(shape));
    }
    return *it->second;
  };
  if (decoded.records.size() != params.size() * 4) {
    throw CheckpointError("checkpoint record count does not match network layout");
  }
  for (auto& e : params.entries()) {
    const auto& value = fetch(e.name, e.value.shape());
    std::copy(value.data.begin(), value.data.end(), e.value.data().begin());
    e.adam.m = fetch(e.name + "@adam.m", e.value.shape()).data;
    e.adam.v = fetch(e.name + "@adam.v", e.value.shape()).data;
    e.adam.step = static_cast<std::uint64_t>(fetch(e.name + "@adam.step", {1}).data[0]);
  }
}

std::uint64_t read_checkpoint_arch_hash(const std::filesystem::path& path) {
  return decode(path).arch_hash;
}

}  // namespace telldrive::tensor
