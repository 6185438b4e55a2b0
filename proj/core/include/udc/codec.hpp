#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "udc/finetune.hpp"
#include "udc/tensor.hpp"

namespace udc {

// -------------------------------------------------------------- bit I/O

class BitWriter {
 public:
  void put_bit(int bit);
  /// Writes the low `n` bits of v, most significant first.
  void put_bits(uint64_t v, int n);
  size_t bit_count() const { return bit_count_; }
  /// Pads the final byte with zeros and returns the buffer.
  std::vector<uint8_t> finish();

 private:
  std::vector<uint8_t> bytes_;
  uint8_t cur_ = 0;
  int fill_ = 0;
  size_t bit_count_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::span<const uint8_t> bytes) : bytes_(bytes) {}
  int get_bit();
  uint64_t get_bits(int n);
  size_t bit_pos() const { return pos_; }
  size_t bit_size() const { return bytes_.size() * 8; }

 private:
  std::span<const uint8_t> bytes_;
  size_t pos_ = 0;
};

// ------------------------------------------- adaptive binary range coder

/// 32-bit renormalizing range coder with an adaptive binary model
/// (counts start at 1/1, halved when their sum reaches 2^16).
class BinaryArithmeticEncoder {
 public:
  void encode(int bit);
  std::vector<uint8_t> finish();

 private:
  void shift_low();
  uint64_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint8_t cache_ = 0;
  uint64_t cache_size_ = 1;
  uint32_t c0_ = 1, c1_ = 1;
  std::vector<uint8_t> out_;
};

class BinaryArithmeticDecoder {
 public:
  explicit BinaryArithmeticDecoder(std::span<const uint8_t> bytes);
  int decode();

 private:
  uint8_t next_byte();
  std::span<const uint8_t> bytes_;
  size_t pos_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint32_t code_ = 0;
  uint32_t c0_ = 1, c1_ = 1;
};

std::vector<uint8_t> arithmetic_encode_mask(std::span<const uint8_t> mask);
std::vector<uint8_t> arithmetic_decode_mask(std::span<const uint8_t> stream, size_t n);

// ------------------------------------------------------------ Golomb-Rice

uint64_t zigzag_encode(int64_t v);
int64_t zigzag_decode(uint64_t v);

/// v coded as unary(v >> k) then k raw remainder bits.
void golomb_rice_encode(BitWriter& w, std::span<const uint64_t> values, int k);
std::vector<uint64_t> golomb_rice_decode(BitReader& r, size_t count, int k);
size_t golomb_rice_cost_bits(std::span<const uint64_t> values, int k);
/// Exhaustive scan over k in [0, k_max].
int best_rice_k(std::span<const uint64_t> values, int k_max);

/// Alternating-run mask codec: 1 bit for the first run's value, 5 bits
/// for the Rice parameter, then Golomb-Rice coded (run_length - 1)s.
std::vector<uint8_t> rle_encode_mask(std::span<const uint8_t> mask);
std::vector<uint8_t> rle_decode_mask(std::span<const uint8_t> stream, size_t n);

// --------------------------------------------------------- tensor blobs

enum class MaskCodec : uint32_t { arithmetic = 1, rle_gr = 2 };
enum class ValueCodec : uint32_t { raw_dense = 1, gr_nonzero = 2 };

/// Canonical lossless content of a compressed tensor: the nonzero mask
/// plus one integer code per element (0 where the mask is 0). Element
/// value = step(bits, range) * code + sign(code) * beta; for bits == 1
/// codes are +-1 and the value equals the code.
struct TensorCodes {
  Shape dims;
  int bits = 8;
  double range = 1.0;
  double beta = 0.0;
  std::vector<uint8_t> mask;
  std::vector<int64_t> codes;

  bool operator==(const TensorCodes&) const = default;
};

TensorCodes tensor_to_codes(const Tensor& deployed, int bits, double range, double beta);
Tensor codes_to_tensor(const TensorCodes& tc);

/// Self-describing blob: "UDCW" header (little-endian fixed-width
/// fields: version, dims, b, nonzero count, r, beta, codec ids, rice k,
/// stream byte lengths) followed by the mask and value bitstreams.
struct CompressedTensor {
  uint32_t version = 1;
  Shape dims;
  int bits = 8;
  uint64_t nnz = 0;
  double range = 1.0;
  double beta = 0.0;
  MaskCodec mask_codec = MaskCodec::arithmetic;
  ValueCodec value_codec = ValueCodec::raw_dense;
  uint8_t rice_k = 0;
  std::vector<uint8_t> mask_stream;
  std::vector<uint8_t> value_stream;

  size_t header_bits() const;
  size_t payload_bits() const { return (mask_stream.size() + value_stream.size()) * 8; }
};

CompressedTensor compress_tensor(const TensorCodes& tc, MaskCodec mask_codec, ValueCodec value_codec);
TensorCodes decompress_tensor(const CompressedTensor& ct);

void serialize_compressed_tensor(std::vector<uint8_t>& out, const CompressedTensor& ct);
CompressedTensor deserialize_compressed_tensor(std::span<const uint8_t> bytes, size_t& offset);

// ------------------------------------------------------------- container

struct LayerSizeReport {
  std::string name;
  int64_t elements = 0;
  int64_t nnz = 0;
  int bits = 0;
  double original_bits = 0;   // 32 bits per weight element
  double predicted_bits = 0;  // Eq.-(4) bound at the realized nonzero rate
  double arith_bits = 0;      // entropy-coded mask + dense b-bit values
  double rle_gr_bits = 0;     // RLE+GR mask + GR nonzero values
  double chosen_bits = 0;     // smaller of the two, as stored
  double bias_bits = 0;
  double header_bits = 0;
};

struct SizeReport {
  std::vector<LayerSizeReport> layers;
  double total_original = 0, total_predicted = 0, total_arith = 0, total_rle_gr = 0, total_chosen = 0;
  double total_bias = 0, total_header = 0;
};

/// Container: magic "UDCNET01", u32 layer count, net descriptor (input
/// dims, classes, flags), then per-layer records (architecture fields,
/// f32 bias block, CompressedTensor blob). Little-endian throughout.
std::vector<uint8_t> compress_network(const ConcreteNetwork& net, SizeReport* report = nullptr);
ConcreteNetwork decompress_network(std::span<const uint8_t> bytes);

void write_file_bytes(const std::string& path, std::span<const uint8_t> bytes);
std::vector<uint8_t> read_file_bytes(const std::string& path);

}  // namespace udc
