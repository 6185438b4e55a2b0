#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "udc/dnas.hpp"
#include "udc/tensor.hpp"

namespace udc {

struct Normalization {
  double mean = 0.0;
  double stddev = 1.0;
};

struct Dataset {
  std::string name;
  Tensor train_x, test_x;
  std::vector<int> train_labels, test_labels;
  Tensor train_targets, test_targets;  // regression
  bool regression = false;
  int num_classes = 0;
  Normalization norm;

  TrainData train_view() const;
  TrainData test_view() const;
  Shape example_shape() const;  // (C,H,W) or (D)
};

struct DatasetSpec {
  std::string source;  // blobs | sr_synth | idx | csv

  // synthetic Gaussian-blob classification
  int classes = 3;
  Shape shape = {1, 8, 8};  // (C,H,W) images or (D) flat features
  int64_t train_n = 1024;
  int64_t test_n = 512;
  double noise = 0.35;
  uint64_t seed = 1234;

  // bilinear-downsample patch regression (SR-style stand-in)
  int sr_size = 16;
  int sr_factor = 2;

  // IDX files (magic 0x00000803 images / 0x00000801 labels)
  std::string train_images, train_labels_file, test_images, test_labels_file;

  // CSV rows: label,feature,feature,...
  std::string train_csv, test_csv;

  bool normalize = true;
};

Dataset load_dataset(const DatasetSpec& spec);

/// Inverse of the dataset normalization (for the invertibility check).
Tensor denormalize(const Tensor& x, const Normalization& n);

// ------------------------------------------------------------ checkpoints

/// Self-describing text header (format version, config hash, tensor
/// manifest with name/dtype/shape/offset) followed by a raw
/// little-endian payload. Two dtypes: f64 tensors and u64 arrays (rng
/// states, counters).
struct Checkpoint {
  uint32_t version = 1;
  std::string config_hash;
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::vector<std::pair<std::string, std::vector<uint64_t>>> words;

  const Tensor* find_tensor(const std::string& name) const;
  const std::vector<uint64_t>* find_words(const std::string& name) const;
};

/// Atomic: writes to <path>.tmp, then renames.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
/// expected_config_hash empty skips the check; a mismatch raises
/// IoError quoting both hashes.
Checkpoint load_checkpoint(const std::string& path, const std::string& expected_config_hash = "");

/// FNV-1a 64-bit, hex string; used as the config hash.
std::string fnv1a_hex(std::string_view text);

// ------------------------------------------------------------ metrics CSV

/// Append-only CSV with a header row written once. Doubles are
/// formatted with %.17g so replayed runs are byte-identical.
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, const std::vector<std::string>& columns);
  void row(std::span<const double> values);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  size_t ncols_;
};

std::string format_double(double v);

}  // namespace udc
