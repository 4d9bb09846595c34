#include "lmi/tensorstore.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "lmi/util.hpp"

static_assert(std::endian::native == std::endian::little,
              "LMIC I/O assumes a little-endian host");

namespace lmi {

const char* dtype_name(DType dtype) {
  switch (dtype) {
    case DType::F32:
      return "F32";
    case DType::F64:
      return "F64";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Tensor

namespace {

std::size_t product(const Tensor::Dims& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= static_cast<std::size_t>(d);
  return n;
}

std::string dims_string(const Tensor::Dims& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

}  // namespace

Tensor Tensor::zeros(Dims dims, DType dtype) {
  const std::size_t n = product(dims);
  return dtype == DType::F32 ? from_f32(std::move(dims), std::vector<float>(n, 0.0f))
                             : from_f64(std::move(dims), std::vector<double>(n, 0.0));
}

Tensor Tensor::from_f32(Dims dims, std::vector<float> data) {
  Tensor t;
  t.dims_ = std::move(dims);
  t.data_ = std::move(data);
  t.validate();
  return t;
}

Tensor Tensor::from_f64(Dims dims, std::vector<double> data) {
  Tensor t;
  t.dims_ = std::move(dims);
  t.data_ = std::move(data);
  t.validate();
  return t;
}

std::size_t Tensor::numel() const {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

DType Tensor::dtype() const {
  return data_.index() == 0 ? DType::F32 : DType::F64;
}

std::span<const float> Tensor::f32() const { return std::get<0>(data_); }
std::span<float> Tensor::f32() { return std::get<0>(data_); }
std::span<const double> Tensor::f64() const { return std::get<1>(data_); }
std::span<double> Tensor::f64() { return std::get<1>(data_); }

double Tensor::get(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v[i]); }, data_);
}

void Tensor::set(std::size_t i, double value) {
  std::visit(
      [i, value](auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        v[i] = static_cast<T>(value);
      },
      data_);
}

Tensor Tensor::cast(DType dtype) const {
  if (dtype == this->dtype()) return *this;
  Tensor out = zeros(dims_, dtype);
  for (std::size_t i = 0; i < numel(); ++i) out.set(i, get(i));
  return out;
}

void Tensor::validate() const {
  if (dims_.empty()) throw std::invalid_argument("tensor rank must be >= 1");
  for (auto d : dims_) {
    if (d == 0) throw std::invalid_argument("tensor extent must be >= 1, got " + dims_string(dims_));
  }
  if (numel() != product(dims_)) {
    throw std::invalid_argument("tensor data length " + std::to_string(numel()) +
                                " does not match dims " + dims_string(dims_));
  }
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (dims_ != other.dims_ || dtype() != other.dtype()) return false;
  return std::visit(
      [&other](const auto& v) {
        using V = std::decay_t<decltype(v)>;
        const auto& w = std::get<V>(other.data_);
        return std::memcmp(v.data(), w.data(), v.size() * sizeof(typename V::value_type)) == 0;
      },
      data_);
}

// ---------------------------------------------------------------------------
// Checkpoint

DuplicateTensorError::DuplicateTensorError(const std::string& name)
    : std::invalid_argument("duplicate tensor name: " + name) {}

void Checkpoint::add(std::string name, Tensor tensor) {
  if (tensors_.contains(name)) throw DuplicateTensorError(name);
  tensors_.emplace(std::move(name), std::move(tensor));
}

void Checkpoint::replace(const std::string& name, Tensor tensor) {
  at(name) = std::move(tensor);
}

bool Checkpoint::contains(const std::string& name) const { return tensors_.contains(name); }

const Tensor& Checkpoint::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("no tensor named " + name);
  return it->second;
}

Tensor& Checkpoint::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("no tensor named " + name);
  return it->second;
}

std::string Checkpoint::meta_or(const std::string& key, const std::string& fallback) const {
  auto it = meta_.find(key);
  return it == meta_.end() ? fallback : it->second;
}

DType Checkpoint::dtype() const {
  if (tensors_.empty()) throw std::invalid_argument("checkpoint has no tensors");
  const DType d = tensors_.begin()->second.dtype();
  for (const auto& [name, t] : tensors_) {
    if (t.dtype() != d) throw std::invalid_argument("checkpoint mixes dtypes at " + name);
  }
  return d;
}

std::size_t Checkpoint::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.numel();
  return n;
}

void Checkpoint::validate() const {
  std::optional<DType> dtype;
  for (const auto& [name, t] : tensors_) {
    if (name.empty()) throw std::invalid_argument("empty tensor name");
    if (!is_valid_utf8(name)) throw std::invalid_argument("tensor name is not valid UTF-8");
    try {
      t.validate();
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(name + ": " + e.what());
    }
    if (dtype && *dtype != t.dtype()) {
      throw std::invalid_argument("checkpoint mixes dtypes at " + name);
    }
    dtype = t.dtype();
  }
  for (const auto& [k, v] : meta_) {
    if (!is_valid_utf8(k) || !is_valid_utf8(v)) {
      throw std::invalid_argument("metadata is not valid UTF-8");
    }
  }
}

bool Checkpoint::tensors_bitwise_equal(const Checkpoint& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  auto it = other.tensors_.begin();
  for (const auto& [name, t] : tensors_) {
    if (name != it->first || !t.bitwise_equal(it->second)) return false;
    ++it;
  }
  return true;
}

bool Checkpoint::bitwise_equal(const Checkpoint& other) const {
  return meta_ == other.meta_ && tensors_bitwise_equal(other);
}

Checkpoint Checkpoint::cast(DType dtype) const {
  Checkpoint out;
  out.meta_ = meta_;
  for (const auto& [name, t] : tensors_) out.tensors_.emplace(name, t.cast(dtype));
  return out;
}

Checkpoint Checkpoint::zeros_like() const {
  Checkpoint out;
  for (const auto& [name, t] : tensors_) out.tensors_.emplace(name, Tensor::zeros(t.dims(), t.dtype()));
  return out;
}

// ---------------------------------------------------------------------------
// LMIC serialization

namespace {

constexpr char kMagic[4] = {'L', 'M', 'I', 'C'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void pod(T v) {
    bytes(&v, sizeof(T));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  void bytes(void* p, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T pod(const char* what) {
    T v;
    bytes(&v, sizeof(T), what);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::uint64_t pos() const { return pos_; }
  std::uint64_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (n > in_.size() - pos_) {
      throw FormatError("truncated file: need " + std::to_string(n) + " bytes for " + what +
                            " at offset " + std::to_string(pos_) + ", " +
                            std::to_string(in_.size() - pos_) + " available",
                        pos_);
    }
  }

  std::span<const std::uint8_t> in_;
  std::uint64_t pos_ = 0;
};

void write_tensors(Writer& w, const Checkpoint& ckpt) {
  w.pod<std::uint64_t>(ckpt.size());
  for (const auto& [name, t] : ckpt.tensors()) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(t.dtype()));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.dims()) w.pod<std::uint64_t>(d);
    if (t.dtype() == DType::F32) {
      w.bytes(t.f32().data(), t.numel() * sizeof(float));
    } else {
      w.bytes(t.f64().data(), t.numel() * sizeof(double));
    }
  }
}

}  // namespace

FormatError::FormatError(const std::string& what, std::uint64_t offset)
    : std::runtime_error(what), offset_(offset) {}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  ckpt.validate();
  Writer w;
  w.bytes(kMagic, 4);
  w.pod<std::uint32_t>(kVersion);
  // std::map keys dump in sorted order, so meta bytes are canonical too.
  const std::string meta = nlohmann::json(ckpt.meta()).dump();
  w.pod<std::uint64_t>(meta.size());
  w.bytes(meta.data(), meta.size());
  write_tensors(w, ckpt);
  return w.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const std::string magic = r.str(4, "magic");
  if (magic != std::string_view(kMagic, 4)) {
    std::string shown;
    for (char c : magic) shown += (c >= 32 && c < 127) ? c : '?';
    throw FormatError("bad magic \"" + shown + "\" (expected \"LMIC\")", 0);
  }
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kVersion) {
    throw FormatError("unsupported LMIC version " + std::to_string(version), 4);
  }
  const auto meta_len = r.pod<std::uint64_t>("meta_len");
  const std::uint64_t meta_off = r.pos();
  const std::string meta_text = r.str(meta_len, "metadata");
  Checkpoint ckpt;
  try {
    const auto j = nlohmann::json::parse(meta_text);
    if (!j.is_object()) throw FormatError("metadata is not a JSON object", meta_off);
    for (const auto& [k, v] : j.items()) {
      if (!v.is_string()) throw FormatError("metadata value for \"" + k + "\" is not a string", meta_off);
      ckpt.meta()[k] = v.get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metadata is not valid JSON: ") + e.what(), meta_off);
  }

  const auto count = r.pod<std::uint64_t>("tensor_count");
  std::optional<DType> common;
  std::string prev;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t entry_off = r.pos();
    const auto name_len = r.pod<std::uint32_t>("name_len");
    std::string name = r.str(name_len, "tensor name");
    if (name.empty()) throw FormatError("empty tensor name", entry_off);
    if (!is_valid_utf8(name)) throw FormatError("tensor name is not valid UTF-8", entry_off);
    if (i > 0 && !(prev < name)) {
      throw FormatError("tensor \"" + name + "\" out of canonical order or duplicated", entry_off);
    }
    const auto dtype_code = r.pod<std::uint8_t>("dtype");
    if (dtype_code > 1) {
      throw FormatError("unknown dtype code " + std::to_string(dtype_code) + " for " + name, r.pos() - 1);
    }
    const auto dtype = static_cast<DType>(dtype_code);
    if (common && *common != dtype) throw FormatError("checkpoint mixes dtypes at " + name, entry_off);
    common = dtype;
    const auto rank = r.pod<std::uint32_t>("rank");
    if (rank == 0) throw FormatError("tensor " + name + " has rank 0", r.pos() - 4);
    if (rank > r.remaining() / sizeof(std::uint64_t)) {
      throw FormatError("truncated file: tensor " + name + " claims rank " + std::to_string(rank), r.pos() - 4);
    }
    Tensor::Dims dims(rank);
    std::uint64_t n = 1;
    const std::size_t scalar = dtype == DType::F32 ? sizeof(float) : sizeof(double);
    for (auto& d : dims) {
      d = r.pod<std::uint64_t>("dims");
      if (d == 0) throw FormatError("tensor " + name + " has a zero extent", r.pos() - 8);
      if (n > std::numeric_limits<std::uint64_t>::max() / d) {
        throw FormatError("tensor " + name + " dims overflow", r.pos() - 8);
      }
      n *= d;
    }
    if (n > r.remaining() / scalar) {
      throw FormatError("truncated file: tensor " + name + " needs " + std::to_string(n * scalar) +
                            " data bytes at offset " + std::to_string(r.pos()) + ", " +
                            std::to_string(r.remaining()) + " available",
                        r.pos());
    }
    Tensor t;
    if (dtype == DType::F32) {
      std::vector<float> data(n);
      r.bytes(data.data(), n * sizeof(float), "tensor data");
      t = Tensor::from_f32(std::move(dims), std::move(data));
    } else {
      std::vector<double> data(n);
      r.bytes(data.data(), n * sizeof(double), "tensor data");
      t = Tensor::from_f64(std::move(dims), std::move(data));
    }
    prev = name;
    ckpt.add(std::move(name), std::move(t));
  }
  if (r.remaining() != 0) {
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after last tensor", r.pos());
  }
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);  // validates before touching the file
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

std::string tensor_digest(const Checkpoint& ckpt) {
  Writer w;
  write_tensors(w, ckpt);
  return sha256_hex(w.take());
}

// ---------------------------------------------------------------------------
// Compatibility

std::string CompatReport::describe() const {
  if (compatible()) return "compatible";
  std::ostringstream os;
  for (const auto& n : missing) os << "missing: " << n << "; ";
  for (const auto& n : extra) os << "extra: " << n << "; ";
  for (const auto& m : shape_mismatches) {
    os << "shape mismatch: " << m.name << " " << dims_string(m.a) << " vs " << dims_string(m.b) << "; ";
  }
  for (const auto& m : dtype_mismatches) {
    os << "dtype mismatch: " << m.name << " " << dtype_name(m.a) << " vs " << dtype_name(m.b) << "; ";
  }
  std::string s = os.str();
  return s.substr(0, s.size() - 2);
}

CompatReport validate_compat(const Checkpoint& a, const Checkpoint& b) {
  CompatReport r;
  for (const auto& [name, ta] : a.tensors()) {
    auto it = b.tensors().find(name);
    if (it == b.tensors().end()) {
      r.extra.push_back(name);
      continue;
    }
    const Tensor& tb = it->second;
    if (ta.dims() != tb.dims()) r.shape_mismatches.push_back({name, ta.dims(), tb.dims()});
    if (ta.dtype() != tb.dtype()) r.dtype_mismatches.push_back({name, ta.dtype(), tb.dtype()});
  }
  for (const auto& [name, tb] : b.tensors()) {
    if (!a.contains(name)) r.missing.push_back(name);
  }
  return r;
}

bool is_valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    // Overlong forms, surrogates, out of range.
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) ||
        (cp >= 0xD800 && cp <= 0xDFFF) || cp > 0x10FFFF) {
      return false;
    }
    i += len;
  }
  return true;
}

}  // namespace lmi
