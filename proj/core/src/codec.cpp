#include "udc/codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "udc/error.hpp"
#include "udc/size_model.hpp"

namespace udc {

// -------------------------------------------------------------- bit I/O

void BitWriter::put_bit(int bit) {
  cur_ = static_cast<uint8_t>((cur_ << 1) | (bit & 1));
  if (++fill_ == 8) {
    bytes_.push_back(cur_);
    cur_ = 0;
    fill_ = 0;
  }
  ++bit_count_;
}

void BitWriter::put_bits(uint64_t v, int n) {
  for (int i = n - 1; i >= 0; --i) put_bit(static_cast<int>((v >> i) & 1));
}

std::vector<uint8_t> BitWriter::finish() {
  if (fill_ > 0) {
    bytes_.push_back(static_cast<uint8_t>(cur_ << (8 - fill_)));
    cur_ = 0;
    fill_ = 0;
  }
  return std::move(bytes_);
}

int BitReader::get_bit() {
  if (pos_ >= bit_size()) {
    throw CodecError("bitstream truncated", static_cast<long long>(pos_));
  }
  size_t byte = pos_ >> 3;
  int shift = 7 - static_cast<int>(pos_ & 7);
  ++pos_;
  return (bytes_[byte] >> shift) & 1;
}

uint64_t BitReader::get_bits(int n) {
  uint64_t v = 0;
  for (int i = 0; i < n; ++i) v = (v << 1) | static_cast<uint64_t>(get_bit());
  return v;
}

// ------------------------------------------- adaptive binary range coder

namespace {
constexpr uint32_t kTopValue = 1u << 24;
constexpr uint32_t kCountLimit = 1u << 16;
}  // namespace

void BinaryArithmeticEncoder::shift_low() {
  if (static_cast<uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
    uint8_t carry = static_cast<uint8_t>(low_ >> 32);
    uint8_t temp = cache_;
    do {
      out_.push_back(static_cast<uint8_t>(temp + carry));
      temp = 0xFF;
    } while (--cache_size_ != 0);
    cache_ = static_cast<uint8_t>(static_cast<uint32_t>(low_) >> 24);
  }
  ++cache_size_;
  low_ = (low_ & 0x00FFFFFFull) << 8;
}

void BinaryArithmeticEncoder::encode(int bit) {
  uint32_t total = c0_ + c1_;
  uint32_t bound = static_cast<uint32_t>((static_cast<uint64_t>(range_) * c0_) / total);
  if (bit == 0) {
    range_ = bound;
    ++c0_;
  } else {
    low_ += bound;
    range_ -= bound;
    ++c1_;
  }
  if (c0_ + c1_ >= kCountLimit) {
    c0_ = (c0_ + 1) >> 1;
    c1_ = (c1_ + 1) >> 1;
  }
  while (range_ < kTopValue) {
    shift_low();
    range_ <<= 8;
  }
}

std::vector<uint8_t> BinaryArithmeticEncoder::finish() {
  for (int i = 0; i < 5; ++i) shift_low();
  return std::move(out_);
}

BinaryArithmeticDecoder::BinaryArithmeticDecoder(std::span<const uint8_t> bytes) : bytes_(bytes) {
  for (int i = 0; i < 5; ++i) code_ = (code_ << 8) | next_byte();
}

uint8_t BinaryArithmeticDecoder::next_byte() { return pos_ < bytes_.size() ? bytes_[pos_++] : 0; }

int BinaryArithmeticDecoder::decode() {
  uint32_t total = c0_ + c1_;
  uint32_t bound = static_cast<uint32_t>((static_cast<uint64_t>(range_) * c0_) / total);
  int bit;
  if (code_ < bound) {
    range_ = bound;
    bit = 0;
    ++c0_;
  } else {
    code_ -= bound;
    range_ -= bound;
    bit = 1;
    ++c1_;
  }
  if (c0_ + c1_ >= kCountLimit) {
    c0_ = (c0_ + 1) >> 1;
    c1_ = (c1_ + 1) >> 1;
  }
  while (range_ < kTopValue) {
    range_ <<= 8;
    code_ = (code_ << 8) | next_byte();
  }
  return bit;
}

std::vector<uint8_t> arithmetic_encode_mask(std::span<const uint8_t> mask) {
  if (mask.empty()) throw CodecError("arithmetic_encode_mask: empty mask");
  BinaryArithmeticEncoder enc;
  for (uint8_t b : mask) enc.encode(b ? 1 : 0);
  return enc.finish();
}

std::vector<uint8_t> arithmetic_decode_mask(std::span<const uint8_t> stream, size_t n) {
  BinaryArithmeticDecoder dec(stream);
  std::vector<uint8_t> mask(n);
  for (size_t i = 0; i < n; ++i) mask[i] = static_cast<uint8_t>(dec.decode());
  return mask;
}

// ------------------------------------------------------------ Golomb-Rice

uint64_t zigzag_encode(int64_t v) {
  return (static_cast<uint64_t>(v) << 1) ^ static_cast<uint64_t>(v >> 63);
}

int64_t zigzag_decode(uint64_t v) { return static_cast<int64_t>(v >> 1) ^ -static_cast<int64_t>(v & 1); }

void golomb_rice_encode(BitWriter& w, std::span<const uint64_t> values, int k) {
  if (k < 0 || k > 48) throw CodecError("golomb_rice_encode: k out of range");
  for (uint64_t v : values) {
    uint64_t q = v >> k;
    if (q > 4096) throw CodecError("golomb_rice_encode: quotient too large for unary prefix");
    for (uint64_t i = 0; i < q; ++i) w.put_bit(1);
    w.put_bit(0);
    if (k > 0) w.put_bits(v & ((uint64_t{1} << k) - 1), k);
  }
}

std::vector<uint64_t> golomb_rice_decode(BitReader& r, size_t count, int k) {
  std::vector<uint64_t> out;
  out.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    uint64_t q = 0;
    while (r.get_bit()) {
      if (++q > 4096) throw CodecError("golomb_rice_decode: runaway unary prefix", static_cast<long long>(r.bit_pos()));
    }
    uint64_t rem = k > 0 ? r.get_bits(k) : 0;
    out.push_back((q << k) | rem);
  }
  return out;
}

size_t golomb_rice_cost_bits(std::span<const uint64_t> values, int k) {
  size_t bits = 0;
  for (uint64_t v : values) bits += static_cast<size_t>(v >> k) + 1 + static_cast<size_t>(k);
  return bits;
}

namespace {
bool rice_k_feasible(std::span<const uint64_t> values, int k) {
  for (uint64_t v : values) {
    if ((v >> k) > 4096) return false;
  }
  return true;
}
}  // namespace

int best_rice_k(std::span<const uint64_t> values, int k_max) {
  int best = -1;
  size_t best_cost = 0;
  for (int k = 0; k <= k_max; ++k) {
    if (!rice_k_feasible(values, k)) continue;
    size_t c = golomb_rice_cost_bits(values, k);
    if (best < 0 || c < best_cost) {
      best_cost = c;
      best = k;
    }
  }
  if (best < 0) {
    // quotients shrink as k grows; 48 covers any plausible code
    for (int k = k_max + 1; k <= 48; ++k) {
      if (rice_k_feasible(values, k)) return k;
    }
    throw CodecError("best_rice_k: no feasible Rice parameter");
  }
  return best;
}

std::vector<uint8_t> rle_encode_mask(std::span<const uint8_t> mask) {
  if (mask.empty()) throw CodecError("rle_encode_mask: empty mask");
  std::vector<uint64_t> runs;
  uint8_t cur = mask[0] ? 1 : 0;
  uint64_t len = 0;
  for (uint8_t b : mask) {
    uint8_t v = b ? 1 : 0;
    if (v == cur) {
      ++len;
    } else {
      runs.push_back(len - 1);
      cur = v;
      len = 1;
    }
  }
  runs.push_back(len - 1);
  // long runs overflow the unary cap at small k; scan only feasible ks
  int k_best = -1;
  size_t cost_best = 0;
  for (int k = 0; k <= 24; ++k) {
    bool feasible = true;
    for (uint64_t v : runs) {
      if ((v >> k) > 4096) {
        feasible = false;
        break;
      }
    }
    if (!feasible) continue;
    size_t c = golomb_rice_cost_bits(runs, k);
    if (k_best < 0 || c < cost_best) {
      k_best = k;
      cost_best = c;
    }
  }
  if (k_best < 0) throw CodecError("rle_encode_mask: no feasible Rice parameter");
  BitWriter w;
  w.put_bit(mask[0] ? 1 : 0);
  w.put_bits(static_cast<uint64_t>(k_best), 5);
  golomb_rice_encode(w, runs, k_best);
  return w.finish();
}

std::vector<uint8_t> rle_decode_mask(std::span<const uint8_t> stream, size_t n) {
  BitReader r(stream);
  uint8_t cur = static_cast<uint8_t>(r.get_bit());
  int k = static_cast<int>(r.get_bits(5));
  std::vector<uint8_t> mask;
  mask.reserve(n);
  while (mask.size() < n) {
    uint64_t q = 0;
    while (r.get_bit()) {
      if (++q > 4096) throw CodecError("rle_decode_mask: runaway unary prefix", static_cast<long long>(r.bit_pos()));
    }
    uint64_t rem = k > 0 ? r.get_bits(k) : 0;
    uint64_t run = ((q << k) | rem) + 1;
    if (mask.size() + run > n) {
      throw CodecError("rle_decode_mask: runs exceed mask length", static_cast<long long>(r.bit_pos()));
    }
    mask.insert(mask.end(), run, cur);
    cur ^= 1;
  }
  return mask;
}

// --------------------------------------------------------- tensor blobs

TensorCodes tensor_to_codes(const Tensor& deployed, int bits, double range, double beta) {
  TensorCodes tc;
  tc.dims = deployed.shape();
  tc.bits = bits;
  tc.range = range;
  tc.beta = beta;
  int64_t n = deployed.numel();
  tc.mask.resize(static_cast<size_t>(n));
  tc.codes.resize(static_cast<size_t>(n));
  if (bits == 1) {
    for (int64_t i = 0; i < n; ++i) {
      double v = deployed[i];
      tc.mask[static_cast<size_t>(i)] = v != 0.0;
      if (v == 0.0) {
        tc.codes[static_cast<size_t>(i)] = 0;
      } else if (v == 1.0 || v == -1.0) {
        tc.codes[static_cast<size_t>(i)] = static_cast<int64_t>(v);
      } else {
        throw CodecError("tensor_to_codes: b=1 value " + std::to_string(v) + " not in {-1,0,+1}");
      }
    }
    return tc;
  }
  double d = quant_step(bits, range);
  int64_t levels = quant_levels(bits);
  for (int64_t i = 0; i < n; ++i) {
    double v = deployed[i];
    tc.mask[static_cast<size_t>(i)] = v != 0.0;
    if (v == 0.0) {
      tc.codes[static_cast<size_t>(i)] = 0;
      continue;
    }
    double sign = v >= 0.0 ? 1.0 : -1.0;
    double code_f = std::round((v - sign * beta) / d);
    int64_t code = static_cast<int64_t>(code_f);
    if (std::llabs(code) > levels || d * static_cast<double>(code) + sign * beta != v) {
      throw CodecError("tensor_to_codes: value " + std::to_string(v) + " is not on the quantization grid");
    }
    tc.codes[static_cast<size_t>(i)] = code;
  }
  return tc;
}

Tensor codes_to_tensor(const TensorCodes& tc) {
  Tensor out(tc.dims);
  int64_t n = out.numel();
  if (tc.bits == 1) {
    for (int64_t i = 0; i < n; ++i) {
      out[i] = tc.mask[static_cast<size_t>(i)] ? static_cast<double>(tc.codes[static_cast<size_t>(i)]) : 0.0;
    }
    return out;
  }
  double d = quant_step(tc.bits, tc.range);
  for (int64_t i = 0; i < n; ++i) {
    if (!tc.mask[static_cast<size_t>(i)]) {
      out[i] = 0.0;
      continue;
    }
    int64_t code = tc.codes[static_cast<size_t>(i)];
    double sign = code >= 0 ? 1.0 : -1.0;
    double v = d * static_cast<double>(code);
    if (tc.beta != 0.0) v += sign * tc.beta;
    out[i] = v;
  }
  return out;
}

CompressedTensor compress_tensor(const TensorCodes& tc, MaskCodec mask_codec, ValueCodec value_codec) {
  CompressedTensor ct;
  ct.dims = tc.dims;
  ct.bits = tc.bits;
  ct.range = tc.range;
  ct.beta = tc.beta;
  ct.mask_codec = mask_codec;
  ct.value_codec = value_codec;
  ct.nnz = 0;
  for (uint8_t m : tc.mask) ct.nnz += m;

  ct.mask_stream = mask_codec == MaskCodec::arithmetic ? arithmetic_encode_mask(tc.mask) : rle_encode_mask(tc.mask);

  BitWriter w;
  if (value_codec == ValueCodec::raw_dense) {
    int width = tc.bits;
    for (size_t i = 0; i < tc.codes.size(); ++i) {
      if (tc.bits == 1) {
        w.put_bit(tc.mask[i] && tc.codes[i] > 0 ? 1 : 0);
      } else {
        w.put_bits(zigzag_encode(tc.mask[i] ? tc.codes[i] : 0), width);
      }
    }
  } else {
    std::vector<uint64_t> nz;
    nz.reserve(static_cast<size_t>(ct.nnz));
    for (size_t i = 0; i < tc.codes.size(); ++i) {
      if (!tc.mask[i]) continue;
      nz.push_back(tc.bits == 1 ? static_cast<uint64_t>(tc.codes[i] > 0) : zigzag_encode(tc.codes[i]));
    }
    int k = nz.empty() ? 0 : best_rice_k(nz, std::max(1, tc.bits));
    ct.rice_k = static_cast<uint8_t>(k);
    golomb_rice_encode(w, nz, k);
  }
  ct.value_stream = w.finish();
  return ct;
}

TensorCodes decompress_tensor(const CompressedTensor& ct) {
  TensorCodes tc;
  tc.dims = ct.dims;
  tc.bits = ct.bits;
  tc.range = ct.range;
  tc.beta = ct.beta;
  size_t n = static_cast<size_t>(shape_numel(ct.dims));
  tc.mask = ct.mask_codec == MaskCodec::arithmetic ? arithmetic_decode_mask(ct.mask_stream, n)
                                                   : rle_decode_mask(ct.mask_stream, n);
  uint64_t nnz = 0;
  for (uint8_t m : tc.mask) nnz += m;
  if (nnz != ct.nnz) {
    throw CodecError("decompress_tensor: decoded mask has " + std::to_string(nnz) + " nonzeros, header says " +
                     std::to_string(ct.nnz));
  }
  tc.codes.assign(n, 0);
  BitReader r(ct.value_stream);
  if (ct.value_codec == ValueCodec::raw_dense) {
    for (size_t i = 0; i < n; ++i) {
      if (ct.bits == 1) {
        int bit = r.get_bit();
        tc.codes[i] = tc.mask[i] ? (bit ? 1 : -1) : 0;
      } else {
        int64_t code = zigzag_decode(r.get_bits(ct.bits));
        tc.codes[i] = tc.mask[i] ? code : 0;
      }
    }
  } else {
    std::vector<uint64_t> nz = golomb_rice_decode(r, static_cast<size_t>(ct.nnz), ct.rice_k);
    size_t j = 0;
    for (size_t i = 0; i < n; ++i) {
      if (!tc.mask[i]) continue;
      tc.codes[i] = ct.bits == 1 ? (nz[j] ? 1 : -1) : zigzag_decode(nz[j]);
      ++j;
    }
  }
  return tc;
}

// ----------------------------------------------------------- serialization

namespace {

void append_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void append_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void append_f64(std::vector<uint8_t>& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  append_u64(out, bits);
}

void append_f32(std::vector<uint8_t>& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  append_u32(out, bits);
}

struct ByteCursor {
  std::span<const uint8_t> bytes;
  size_t off = 0;

  void need(size_t n) const {
    if (off + n > bytes.size()) {
      throw CodecError("container truncated at byte " + std::to_string(off), static_cast<long long>(off) * 8);
    }
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | bytes[off + static_cast<size_t>(i)];
    off += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[off + static_cast<size_t>(i)];
    off += 8;
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::vector<uint8_t> blob(size_t n) {
    need(n);
    std::vector<uint8_t> v(bytes.begin() + static_cast<long>(off), bytes.begin() + static_cast<long>(off + n));
    off += n;
    return v;
  }
};

constexpr char kTensorMagic[4] = {'U', 'D', 'C', 'W'};
constexpr char kNetMagic[8] = {'U', 'D', 'C', 'N', 'E', 'T', '0', '1'};

}  // namespace

size_t CompressedTensor::header_bits() const {
  return (4 + 4 + 4 + 4 * dims.size() + 4 + 8 + 8 + 8 + 4 + 4 + 4 + 8 + 8) * 8;
}

void serialize_compressed_tensor(std::vector<uint8_t>& out, const CompressedTensor& ct) {
  out.insert(out.end(), kTensorMagic, kTensorMagic + 4);
  append_u32(out, ct.version);
  append_u32(out, static_cast<uint32_t>(ct.dims.size()));
  for (int64_t d : ct.dims) append_u32(out, static_cast<uint32_t>(d));
  append_u32(out, static_cast<uint32_t>(ct.bits));
  append_u64(out, ct.nnz);
  append_f64(out, ct.range);
  append_f64(out, ct.beta);
  append_u32(out, static_cast<uint32_t>(ct.mask_codec));
  append_u32(out, static_cast<uint32_t>(ct.value_codec));
  append_u32(out, ct.rice_k);
  append_u64(out, ct.mask_stream.size());
  append_u64(out, ct.value_stream.size());
  out.insert(out.end(), ct.mask_stream.begin(), ct.mask_stream.end());
  out.insert(out.end(), ct.value_stream.begin(), ct.value_stream.end());
}

CompressedTensor deserialize_compressed_tensor(std::span<const uint8_t> bytes, size_t& offset) {
  ByteCursor c{bytes, offset};
  c.need(4);
  if (std::memcmp(bytes.data() + c.off, kTensorMagic, 4) != 0) {
    throw CodecError("bad tensor magic at byte " + std::to_string(c.off));
  }
  c.off += 4;
  CompressedTensor ct;
  ct.version = c.u32();
  if (ct.version != 1) throw CodecError("unsupported tensor format version " + std::to_string(ct.version));
  uint32_t ndim = c.u32();
  if (ndim > 8) throw CodecError("implausible tensor rank " + std::to_string(ndim));
  ct.dims.clear();
  for (uint32_t i = 0; i < ndim; ++i) ct.dims.push_back(static_cast<int64_t>(c.u32()));
  ct.bits = static_cast<int>(c.u32());
  ct.nnz = c.u64();
  ct.range = c.f64();
  ct.beta = c.f64();
  ct.mask_codec = static_cast<MaskCodec>(c.u32());
  ct.value_codec = static_cast<ValueCodec>(c.u32());
  ct.rice_k = static_cast<uint8_t>(c.u32());
  uint64_t mask_bytes = c.u64();
  uint64_t value_bytes = c.u64();
  ct.mask_stream = c.blob(static_cast<size_t>(mask_bytes));
  ct.value_stream = c.blob(static_cast<size_t>(value_bytes));
  offset = c.off;
  return ct;
}

// ------------------------------------------------------------- container

std::vector<uint8_t> compress_network(const ConcreteNetwork& net, SizeReport* report) {
  std::vector<uint8_t> out;
  out.insert(out.end(), kNetMagic, kNetMagic + 8);
  append_u32(out, static_cast<uint32_t>(net.layers.size()));
  // net descriptor
  append_u32(out, static_cast<uint32_t>(net.input_shape.size()));
  for (int64_t d : net.input_shape) append_u32(out, static_cast<uint32_t>(d));
  append_u32(out, static_cast<uint32_t>(net.num_classes));
  append_u32(out, net.regression ? 1u : 0u);

  SizeReport rep;
  for (const ConcreteLayer& l : net.layers) {
    append_u32(out, static_cast<uint32_t>(l.op));
    append_u32(out, static_cast<uint32_t>(l.reduce));
    append_u32(out, static_cast<uint32_t>(l.stride));
    append_u64(out, static_cast<uint64_t>(l.in_features));
    append_u64(out, static_cast<uint64_t>(l.out_features));
    append_f64(out, l.sparsity_target);
    if (!l.has_weights()) {
      append_u64(out, 0);  // no bias
      append_u64(out, 0);  // no weight blob
      continue;
    }
    append_u64(out, static_cast<uint64_t>(l.bias.numel()));
    for (int64_t i = 0; i < l.bias.numel(); ++i) append_f32(out, static_cast<float>(l.bias[i]));

    TensorCodes tc = tensor_to_codes(l.theta, l.bits, l.range.item(), l.beta);
    CompressedTensor arith = compress_tensor(tc, MaskCodec::arithmetic, ValueCodec::raw_dense);
    CompressedTensor rle = compress_tensor(tc, MaskCodec::rle_gr, ValueCodec::gr_nonzero);
    const CompressedTensor& chosen = arith.payload_bits() <= rle.payload_bits() ? arith : rle;

    std::vector<uint8_t> blob;
    serialize_compressed_tensor(blob, chosen);
    append_u64(out, blob.size());
    out.insert(out.end(), blob.begin(), blob.end());

    LayerSizeReport row;
    row.name = l.name;
    row.elements = l.theta.numel();
    row.nnz = static_cast<int64_t>(chosen.nnz);
    row.bits = l.bits;
    row.original_bits = 32.0 * static_cast<double>(l.theta.numel());
    double s_hat = static_cast<double>(chosen.nnz) / static_cast<double>(l.theta.numel());
    row.predicted_bits = layer_size_bits(s_hat, static_cast<double>(l.bits), static_cast<double>(l.theta.numel()));
    row.arith_bits = static_cast<double>(arith.payload_bits());
    row.rle_gr_bits = static_cast<double>(rle.payload_bits());
    row.chosen_bits = static_cast<double>(chosen.payload_bits());
    row.bias_bits = kBiasBits * static_cast<double>(l.bias.numel());
    row.header_bits = static_cast<double>(chosen.header_bits());
    rep.layers.push_back(row);
  }
  for (const auto& r : rep.layers) {
    rep.total_original += r.original_bits;
    rep.total_predicted += r.predicted_bits;
    rep.total_arith += r.arith_bits;
    rep.total_rle_gr += r.rle_gr_bits;
    rep.total_chosen += r.chosen_bits;
    rep.total_bias += r.bias_bits;
    rep.total_header += r.header_bits;
  }
  if (report) *report = std::move(rep);
  return out;
}

ConcreteNetwork decompress_network(std::span<const uint8_t> bytes) {
  ByteCursor c{bytes, 0};
  c.need(8);
  if (std::memcmp(bytes.data(), kNetMagic, 8) != 0) throw CodecError("bad container magic");
  c.off += 8;
  uint32_t layer_count = c.u32();
  ConcreteNetwork net;
  uint32_t ndim = c.u32();
  if (ndim > 4) throw CodecError("implausible input rank");
  for (uint32_t i = 0; i < ndim; ++i) net.input_shape.push_back(static_cast<int64_t>(c.u32()));
  net.num_classes = static_cast<int>(c.u32());
  net.regression = c.u32() != 0;
  net.format = QuantFormat::q;  // containers hold deployed (uniform) weights

  for (uint32_t li = 0; li < layer_count; ++li) {
    ConcreteLayer l;
    l.name = "layer" + std::to_string(li);
    l.op = static_cast<OperatorKind>(c.u32());
    l.reduce = static_cast<ConcreteLayer::InputReduce>(c.u32());
    l.stride = static_cast<int>(c.u32());
    l.in_features = static_cast<int64_t>(c.u64());
    l.out_features = static_cast<int64_t>(c.u64());
    l.sparsity_target = c.f64();
    uint64_t bias_count = c.u64();
    if (bias_count > 0) {
      l.bias = Tensor({static_cast<int64_t>(bias_count)});
      for (uint64_t i = 0; i < bias_count; ++i) l.bias[static_cast<int64_t>(i)] = static_cast<double>(c.f32());
    }
    uint64_t blob_len = c.u64();
    if (blob_len > 0) {
      size_t off = c.off;
      CompressedTensor ct = deserialize_compressed_tensor(bytes, off);
      if (off - c.off != blob_len) {
        throw CodecError("layer blob length mismatch: header says " + std::to_string(blob_len) + ", parsed " +
                         std::to_string(off - c.off));
      }
      c.off = off;
      TensorCodes tc = decompress_tensor(ct);
      l.theta = codes_to_tensor(tc);
      l.mask = Tensor(l.theta.shape());
      for (size_t i = 0; i < tc.mask.size(); ++i) l.mask[static_cast<int64_t>(i)] = tc.mask[i] ? 1.0 : 0.0;
      l.bits = ct.bits;
      l.range = Tensor::scalar(ct.range);
      l.beta = ct.beta;
    } else {
      l.range = Tensor::scalar(1.0);
    }
    net.layers.push_back(std::move(l));
  }
  return net;
}

void write_file_bytes(const std::string& path, std::span<const uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to '" + path + "'");
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  f.seekg(0, std::ios::end);
  std::streamsize n = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(bytes.data()), n);
  if (!f) throw IoError("short read from '" + path + "'");
  return bytes;
}

}  // namespace udc
