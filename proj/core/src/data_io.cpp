#include "udc/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "udc/error.hpp"
#include "udc/rng.hpp"

namespace udc {

TrainData Dataset::train_view() const {
  TrainData d;
  d.x = &train_x;
  if (regression) {
    d.targets = &train_targets;
  } else {
    d.labels = &train_labels;
  }
  return d;
}

TrainData Dataset::test_view() const {
  TrainData d;
  d.x = &test_x;
  if (regression) {
    d.targets = &test_targets;
  } else {
    d.labels = &test_labels;
  }
  return d;
}

Shape Dataset::example_shape() const {
  Shape s = train_x.shape();
  s.erase(s.begin());
  return s;
}

// ----------------------------------------------------------- synthetic sets

namespace {

// smooth random field: sum of a few Gaussian bumps, range roughly [0,1]
Tensor random_field(int64_t h, int64_t w, Philox& rng, int bumps) {
  Tensor img({h, w});
  struct Bump {
    double cy, cx, sy, sx, a;
  };
  std::vector<Bump> bs;
  for (int b = 0; b < bumps; ++b) {
    bs.push_back({rng.uniform(0, static_cast<double>(h)), rng.uniform(0, static_cast<double>(w)),
                  rng.uniform(0.8, 2.5), rng.uniform(0.8, 2.5), rng.uniform(-1.0, 1.0)});
  }
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double v = 0.0;
      for (const Bump& b : bs) {
        double dy = (static_cast<double>(y) - b.cy) / b.sy;
        double dx = (static_cast<double>(x) - b.cx) / b.sx;
        v += b.a * std::exp(-0.5 * (dy * dy + dx * dx));
      }
      img[y * w + x] = 0.5 + 0.5 * std::tanh(v);
    }
  return img;
}

Dataset make_blobs(const DatasetSpec& spec) {
  Dataset ds;
  ds.name = "blobs";
  ds.num_classes = spec.classes;
  if (spec.classes < 2) throw DomainError("blobs: need at least 2 classes");
  Philox proto_rng(spec.seed, 10);
  bool image = spec.shape.size() == 3;
  int64_t feat = shape_numel(spec.shape);
  std::vector<Tensor> prototypes;
  for (int c = 0; c < spec.classes; ++c) {
    if (image) {
      Tensor p({spec.shape[0], spec.shape[1], spec.shape[2]});
      for (int64_t ch = 0; ch < spec.shape[0]; ++ch) {
        Tensor f = random_field(spec.shape[1], spec.shape[2], proto_rng, 4);
        std::copy(f.values().begin(), f.values().end(), p.data() + ch * spec.shape[1] * spec.shape[2]);
      }
      prototypes.push_back(std::move(p));
    } else {
      Tensor p(spec.shape);
      for (int64_t i = 0; i < feat; ++i) p[i] = proto_rng.uniform(-1.0, 1.0);
      prototypes.push_back(std::move(p));
    }
  }
  auto fill = [&](Tensor& x, std::vector<int>& labels, int64_t n, uint64_t stream) {
    Philox rng(spec.seed, stream);
    Shape xs = spec.shape;
    xs.insert(xs.begin(), n);
    x = Tensor(xs);
    labels.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      int c = static_cast<int>(i % spec.classes);
      labels[static_cast<size_t>(i)] = c;
      const Tensor& p = prototypes[static_cast<size_t>(c)];
      for (int64_t j = 0; j < feat; ++j) {
        x[i * feat + j] = p[j] + spec.noise * rng.normal();
      }
    }
  };
  fill(ds.train_x, ds.train_labels, spec.train_n, 11);
  fill(ds.test_x, ds.test_labels, spec.test_n, 12);  // disjoint stream -> disjoint examples
  return ds;
}

// bilinear resize to (oh, ow)
Tensor bilinear(const Tensor& img, int64_t oh, int64_t ow) {
  int64_t h = img.dim(0), w = img.dim(1);
  Tensor out({oh, ow});
  for (int64_t y = 0; y < oh; ++y) {
    double fy = oh > 1 ? static_cast<double>(y) * (h - 1) / (oh - 1) : 0.0;
    int64_t y0 = static_cast<int64_t>(fy);
    int64_t y1 = std::min(y0 + 1, h - 1);
    double wy = fy - static_cast<double>(y0);
    for (int64_t x = 0; x < ow; ++x) {
      double fx = ow > 1 ? static_cast<double>(x) * (w - 1) / (ow - 1) : 0.0;
      int64_t x0 = static_cast<int64_t>(fx);
      int64_t x1 = std::min(x0 + 1, w - 1);
      double wx = fx - static_cast<double>(x0);
      double v = (1 - wy) * ((1 - wx) * img[y0 * w + x0] + wx * img[y0 * w + x1]) +
                 wy * ((1 - wx) * img[y1 * w + x0] + wx * img[y1 * w + x1]);
      out[y * ow + x] = v;
    }
  }
  return out;
}

Dataset make_sr_synth(const DatasetSpec& spec) {
  Dataset ds;
  ds.name = "sr_synth";
  ds.regression = true;
  int64_t hw = spec.sr_size;
  int64_t lr = hw / spec.sr_factor;
  if (lr < 2) throw DomainError("sr_synth: size/factor too small");
  auto fill = [&](Tensor& x, Tensor& t, int64_t n, uint64_t stream) {
    Philox rng(spec.seed, stream);
    x = Tensor({n, 1, hw, hw});
    t = Tensor({n, 1, hw, hw});
    for (int64_t i = 0; i < n; ++i) {
      Tensor hi = random_field(hw, hw, rng, 6);
      Tensor low = bilinear(hi, lr, lr);
      Tensor up = bilinear(low, hw, hw);
      std::copy(hi.values().begin(), hi.values().end(), t.data() + i * hw * hw);
      std::copy(up.values().begin(), up.values().end(), x.data() + i * hw * hw);
    }
  };
  fill(ds.train_x, ds.train_targets, spec.train_n, 21);
  fill(ds.test_x, ds.test_targets, spec.test_n, 22);
  return ds;
}

// --------------------------------------------------------------- IDX / CSV

uint32_t read_be_u32(std::ifstream& f, const std::string& path, size_t at) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) throw IoError(path + ": truncated at byte " + std::to_string(at));
  return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

Tensor load_idx_images(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open IDX file '" + path + "'");
  uint32_t magic = read_be_u32(f, path, 0);
  if (magic != 0x00000803u) {
    std::ostringstream os;
    os << path << ": bad image magic 0x" << std::hex << magic << " at byte 0 (want 0x00000803)";
    throw IoError(os.str());
  }
  uint32_t n = read_be_u32(f, path, 4), h = read_be_u32(f, path, 8), w = read_be_u32(f, path, 12);
  Tensor out({static_cast<int64_t>(n), 1, static_cast<int64_t>(h), static_cast<int64_t>(w)});
  std::vector<unsigned char> buf(static_cast<size_t>(n) * h * w);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError(path + ": truncated pixel data (expected " + std::to_string(buf.size()) + " bytes)");
  for (size_t i = 0; i < buf.size(); ++i) out[static_cast<int64_t>(i)] = static_cast<double>(buf[i]) / 255.0;
  return out;
}

std::vector<int> load_idx_labels(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open IDX file '" + path + "'");
  uint32_t magic = read_be_u32(f, path, 0);
  if (magic != 0x00000801u) {
    std::ostringstream os;
    os << path << ": bad label magic 0x" << std::hex << magic << " at byte 0 (want 0x00000801)";
    throw IoError(os.str());
  }
  uint32_t n = read_be_u32(f, path, 4);
  std::vector<unsigned char> buf(n);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  if (!f) throw IoError(path + ": truncated label data");
  return std::vector<int>(buf.begin(), buf.end());
}

void load_csv(const std::string& path, Tensor* x, std::vector<int>* labels) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open CSV file '" + path + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  size_t line_no = 0;
  size_t arity = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw IoError(path + ": line " + std::to_string(line_no) + ": cannot parse '" + cell + "'");
      }
    }
    if (row.size() < 2) throw IoError(path + ": line " + std::to_string(line_no) + ": need label plus features");
    if (arity == 0) arity = row.size();
    if (row.size() != arity) {
      throw IoError(path + ": line " + std::to_string(line_no) + ": row has " + std::to_string(row.size()) +
                    " fields, expected " + std::to_string(arity));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError(path + ": no data rows");
  int64_t n = static_cast<int64_t>(rows.size());
  int64_t d = static_cast<int64_t>(arity - 1);
  *x = Tensor({n, d});
  labels->resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    (*labels)[static_cast<size_t>(i)] = static_cast<int>(rows[static_cast<size_t>(i)][0]);
    for (int64_t j = 0; j < d; ++j) (*x)[i * d + j] = rows[static_cast<size_t>(i)][static_cast<size_t>(j + 1)];
  }
}

}  // namespace

Dataset load_dataset(const DatasetSpec& spec) {
  Dataset ds;
  if (spec.source == "blobs") {
    ds = make_blobs(spec);
  } else if (spec.source == "sr_synth") {
    ds = make_sr_synth(spec);
  } else if (spec.source == "idx") {
    ds.name = "idx";
    ds.train_x = load_idx_images(spec.train_images);
    ds.train_labels = load_idx_labels(spec.train_labels_file);
    ds.test_x = load_idx_images(spec.test_images);
    ds.test_labels = load_idx_labels(spec.test_labels_file);
    if (ds.train_x.dim(0) != static_cast<int64_t>(ds.train_labels.size())) {
      throw IoError("IDX: image/label count mismatch");
    }
    int maxl = 0;
    for (int l : ds.train_labels) maxl = std::max(maxl, l);
    for (int l : ds.test_labels) maxl = std::max(maxl, l);
    ds.num_classes = maxl + 1;
  } else if (spec.source == "csv") {
    ds.name = "csv";
    load_csv(spec.train_csv, &ds.train_x, &ds.train_labels);
    load_csv(spec.test_csv, &ds.test_x, &ds.test_labels);
    int maxl = 0;
    for (int l : ds.train_labels) maxl = std::max(maxl, l);
    for (int l : ds.test_labels) maxl = std::max(maxl, l);
    ds.num_classes = maxl + 1;
  } else {
    throw ConfigError("dataset.source: unknown source '" + spec.source + "' (blobs|sr_synth|idx|csv)");
  }
  for (int l : ds.train_labels) {
    if (l < 0 || l >= ds.num_classes) throw IoError("label " + std::to_string(l) + " outside class range");
  }
  if (spec.normalize) {
    double mean = 0.0;
    for (double v : ds.train_x.values()) mean += v;
    mean /= static_cast<double>(ds.train_x.numel());
    double var = 0.0;
    for (double v : ds.train_x.values()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(ds.train_x.numel());
    double stddev = std::sqrt(std::max(var, 1e-12));
    ds.norm = {mean, stddev};
    for (double& v : ds.train_x.values()) v = (v - mean) / stddev;
    for (double& v : ds.test_x.values()) v = (v - mean) / stddev;
  }
  return ds;
}

Tensor denormalize(const Tensor& x, const Normalization& n) {
  Tensor out = x;
  for (double& v : out.values()) v = v * n.stddev + n.mean;
  return out;
}

// ------------------------------------------------------------ checkpoints

const Tensor* Checkpoint::find_tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

const std::vector<uint64_t>* Checkpoint::find_words(const std::string& name) const {
  for (const auto& [n, w] : words)
    if (n == name) return &w;
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ostringstream header;
  header << "UDCCKPT1\n";
  header << "version " << ckpt.version << "\n";
  header << "config_hash " << (ckpt.config_hash.empty() ? "-" : ckpt.config_hash) << "\n";
  size_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    header << "tensor " << name << " f64 " << t.rank();
    for (int64_t d : t.shape()) header << " " << d;
    header << " " << offset << "\n";
    offset += static_cast<size_t>(t.numel()) * 8;
  }
  for (const auto& [name, w] : ckpt.words) {
    header << "tensor " << name << " u64 1 " << w.size() << " " << offset << "\n";
    offset += w.size() * 8;
  }
  header << "end\n";

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp + "' for writing");
    std::string h = header.str();
    f.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, t] : ckpt.tensors) {
      f.write(reinterpret_cast<const char*>(t.data()), t.numel() * 8);
    }
    for (const auto& [name, w] : ckpt.words) {
      f.write(reinterpret_cast<const char*>(w.data()), static_cast<std::streamsize>(w.size() * 8));
    }
    if (!f) throw IoError("short write to '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw IoError("cannot rename '" + tmp + "' to '" + path + "'");
  }
}

Checkpoint load_checkpoint(const std::string& path, const std::string& expected_config_hash) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  std::string line;
  if (!std::getline(f, line) || line != "UDCCKPT1") throw IoError(path + ": not a checkpoint (bad magic)");
  Checkpoint ckpt;
  struct Entry {
    std::string name, dtype;
    Shape shape;
    size_t offset;
    size_t bytes;
  };
  std::vector<Entry> entries;
  bool got_end = false;
  while (std::getline(f, line)) {
    if (line == "end") {
      got_end = true;
      break;
    }
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind == "version") {
      ss >> ckpt.version;
      if (ckpt.version != 1) throw IoError(path + ": unsupported checkpoint version " + std::to_string(ckpt.version));
    } else if (kind == "config_hash") {
      ss >> ckpt.config_hash;
      if (ckpt.config_hash == "-") ckpt.config_hash.clear();
    } else if (kind == "tensor") {
      Entry e;
      int ndim = 0;
      ss >> e.name >> e.dtype >> ndim;
      int64_t numel = 1;
      for (int i = 0; i < ndim; ++i) {
        int64_t d = 0;
        ss >> d;
        e.shape.push_back(d);
        numel *= d;
      }
      ss >> e.offset;
      if (!ss) throw IoError(path + ": malformed manifest line: " + line);
      e.bytes = static_cast<size_t>(numel) * 8;
      entries.push_back(std::move(e));
    } else if (!kind.empty()) {
      throw IoError(path + ": unknown header line: " + line);
    }
  }
  if (!got_end) throw IoError(path + ": truncated header (no 'end')");
  if (!expected_config_hash.empty() && ckpt.config_hash != expected_config_hash) {
    throw IoError(path + ": config hash mismatch: checkpoint has '" + ckpt.config_hash + "', expected '" +
                  expected_config_hash + "'");
  }
  std::streampos payload_start = f.tellg();
  f.seekg(0, std::ios::end);
  size_t payload_size = static_cast<size_t>(f.tellg() - payload_start);
  // manifest sanity: offsets in-range and non-overlapping
  std::vector<std::pair<size_t, size_t>> spans;
  for (const auto& e : entries) {
    if (e.offset + e.bytes > payload_size) {
      throw IoError(path + ": manifest entry '" + e.name + "' extends past payload (corrupt or truncated)");
    }
    spans.emplace_back(e.offset, e.offset + e.bytes);
  }
  std::sort(spans.begin(), spans.end());
  for (size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) throw IoError(path + ": overlapping manifest offsets");
  }
  for (const auto& e : entries) {
    f.seekg(payload_start + static_cast<std::streamoff>(e.offset));
    if (e.dtype == "f64") {
      Tensor t(e.shape);
      f.read(reinterpret_cast<char*>(t.data()), t.numel() * 8);
      if (!f) throw IoError(path + ": truncated payload for '" + e.name + "'");
      ckpt.tensors.emplace_back(e.name, std::move(t));
    } else if (e.dtype == "u64") {
      std::vector<uint64_t> w(static_cast<size_t>(shape_numel(e.shape)));
      f.read(reinterpret_cast<char*>(w.data()), static_cast<std::streamsize>(w.size() * 8));
      if (!f) throw IoError(path + ": truncated payload for '" + e.name + "'");
      ckpt.words.emplace_back(e.name, std::move(w));
    } else {
      throw IoError(path + ": unknown dtype '" + e.dtype + "' for '" + e.name + "'");
    }
  }
  return ckpt;
}

std::string fnv1a_hex(std::string_view text) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ------------------------------------------------------------ metrics CSV

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return std::string(buf);
}

MetricsWriter::MetricsWriter(const std::string& path, const std::vector<std::string>& columns)
    : path_(path), ncols_(columns.size()) {
  bool need_header = true;
  {
    std::ifstream probe(path, std::ios::binary);
    if (probe && probe.peek() != std::ifstream::traits_type::eof()) need_header = false;
  }
  if (need_header) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open metrics file '" + path + "'");
    for (size_t i = 0; i < columns.size(); ++i) {
      if (i) f << ',';
      f << columns[i];
    }
    f << '\n';
  }
}

void MetricsWriter::row(std::span<const double> values) {
  if (values.size() != ncols_) {
    throw IoError("metrics row has " + std::to_string(values.size()) + " values, header has " +
                  std::to_string(ncols_));
  }
  std::ofstream f(path_, std::ios::app);
  if (!f) throw IoError("cannot append to metrics file '" + path_ + "'");
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) f << ',';
    f << format_double(values[i]);
  }
  f << '\n';
}

}  // namespace udc
