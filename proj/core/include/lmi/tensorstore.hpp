#pragma once

// Named tensor container and the LMIC binary checkpoint format.
//
// LMIC layout (all integers little-endian):
//   "LMIC" | u32 version=1 | u64 meta_len | meta (JSON object string->string)
//   u64 tensor_count
//   per tensor, sorted by name:
//     u32 name_len | name | u8 dtype (0=F32, 1=F64) | u32 rank | u64 dims[rank]
//     data: prod(dims) scalars, row-major

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace lmi {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

const char* dtype_name(DType dtype);

class Tensor {
 public:
  using Dims = std::vector<std::uint64_t>;

  Tensor() = default;

  static Tensor zeros(Dims dims, DType dtype);
  static Tensor from_f32(Dims dims, std::vector<float> data);
  static Tensor from_f64(Dims dims, std::vector<double> data);

  const Dims& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t numel() const;
  DType dtype() const;

  std::span<const float> f32() const;
  std::span<float> f32();
  std::span<const double> f64() const;
  std::span<double> f64();

  // Typed access; T must match dtype().
  template <typename T>
  std::span<const T> data() const {
    if constexpr (std::is_same_v<T, float>) {
      return f32();
    } else {
      return f64();
    }
  }
  template <typename T>
  std::span<T> data() {
    if constexpr (std::is_same_v<T, float>) {
      return f32();
    } else {
      return f64();
    }
  }

  double get(std::size_t i) const;
  void set(std::size_t i, double value);

  Tensor cast(DType dtype) const;

  // Throws std::invalid_argument when rank/extent/length invariants fail.
  void validate() const;

  // Bitwise comparison of dims, dtype and payload.
  bool bitwise_equal(const Tensor& other) const;

 private:
  Dims dims_;
  std::variant<std::vector<float>, std::vector<double>> data_;
};

using MetaMap = std::map<std::string, std::string>;

class DuplicateTensorError : public std::invalid_argument {
 public:
  explicit DuplicateTensorError(const std::string& name);
};

// A set of named tensors plus flat string metadata. Iteration order is the
// byte-wise lexicographic order of names, which is also the serialization
// order.
class Checkpoint {
 public:
  using TensorMap = std::map<std::string, Tensor>;

  // Throws DuplicateTensorError if the name is taken.
  void add(std::string name, Tensor tensor);
  void replace(const std::string& name, Tensor tensor);

  bool contains(const std::string& name) const;
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);

  const TensorMap& tensors() const { return tensors_; }
  TensorMap& tensors() { return tensors_; }
  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }

  MetaMap& meta() { return meta_; }
  const MetaMap& meta() const { return meta_; }
  std::string meta_or(const std::string& key, const std::string& fallback = "") const;

  // Common dtype of all tensors; throws on an empty or mixed checkpoint.
  DType dtype() const;
  std::size_t parameter_count() const;

  // Checks every tensor invariant, the single-dtype rule and UTF-8 names.
  void validate() const;

  // Same tensor names, dims, dtypes and bytes; metadata is ignored.
  bool tensors_bitwise_equal(const Checkpoint& other) const;
  bool bitwise_equal(const Checkpoint& other) const;

  Checkpoint cast(DType dtype) const;
  // Same names/dims/dtype, all zeros, no metadata.
  Checkpoint zeros_like() const;

 private:
  TensorMap tensors_;
  MetaMap meta_;
};

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset);
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Hex SHA-256 over the canonical serialization of the tensors only, so two
// checkpoints with equal parameters share a digest regardless of metadata.
std::string tensor_digest(const Checkpoint& ckpt);

struct ShapeMismatch {
  std::string name;
  Tensor::Dims a;
  Tensor::Dims b;
};

struct DTypeMismatch {
  std::string name;
  DType a;
  DType b;
};

struct CompatReport {
  std::vector<std::string> missing;  // in b, absent from a
  std::vector<std::string> extra;    // in a, absent from b
  std::vector<ShapeMismatch> shape_mismatches;
  std::vector<DTypeMismatch> dtype_mismatches;

  bool compatible() const {
    return missing.empty() && extra.empty() && shape_mismatches.empty() &&
           dtype_mismatches.empty();
  }
  // Same names and shapes; dtypes may differ.
  bool same_layout() const { return missing.empty() && extra.empty() && shape_mismatches.empty(); }
  std::string describe() const;
};

CompatReport validate_compat(const Checkpoint& a, const Checkpoint& b);

bool is_valid_utf8(std::string_view s);

}  // namespace lmi
