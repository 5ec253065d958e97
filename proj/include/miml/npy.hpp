#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "miml/errors.hpp"
#include "miml/tensor.hpp"

namespace miml {

// Element types understood by the NPY reader. OpenMIC ships X as |u1,
// Y_true as <f4, Y_mask as |b1 and sample_key as fixed-width unicode.
enum class DType { u8, b1, f4, f8, i8, unicode, bytes };

std::string dtype_descr(DType dtype, std::size_t item_size);

/// Decoded NPY array. Numeric dtypes land in `values` (exact for u1/b1/i8
/// values below 2^53); string dtypes land in `strings` as UTF-8.
struct NpyArray {
  DType dtype = DType::f8;
  std::size_t item_size = 8;
  Shape shape;
  Tensor values;
  std::vector<std::string> strings;

  std::size_t count() const { return shape_size(shape); }
  bool is_string() const { return dtype == DType::unicode || dtype == DType::bytes; }
};

class NpyError : public DataError {
 public:
  enum class Kind { bad_magic, unsupported_version, bad_header, unsupported_dtype, fortran_order, truncated };
  NpyError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Parses an NPY v1.0 byte stream (little-endian header length, Python-literal
/// header dict). Only C-order arrays are accepted.
NpyArray parse_npy(std::span<const std::uint8_t> bytes);

/// Serializes `array` in its own dtype. f4 values are rounded to float.
std::vector<std::uint8_t> write_npy(const NpyArray& array);

NpyArray make_f4_array(const Tensor& values);
NpyArray make_f4_array(Shape shape, std::span<const float> values);
NpyArray make_string_array(const std::vector<std::string>& strings);

enum class ZipMethod { stored, deflate };

/// Reads every ".npy" member of a ZIP archive, keyed by member name with the
/// ".npy" suffix removed. Other members are skipped with a warning.
std::map<std::string, NpyArray> parse_npz(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> write_npz(const std::map<std::string, NpyArray>& arrays,
                                    ZipMethod method = ZipMethod::stored);

const NpyArray& npz_member(const std::map<std::string, NpyArray>& arrays, const std::string& name);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace miml
