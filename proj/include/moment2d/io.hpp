#pragma once

#include <bit>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moment2d/model.hpp"

namespace m2d {

static_assert(std::endian::native == std::endian::little,
              "file formats are defined little-endian; big-endian hosts are unsupported");

/// One moment-sentence pair.
struct AnnotationRecord {
  std::string video_id;
  double duration_s = 0.0;
  double start_s = 0.0;
  double end_s = 0.0;
  std::string query;

  void validate(const std::string& where) const {
    if (video_id.empty()) throw std::runtime_error(where + ": empty video_id");
    if (!(start_s >= 0.0 && start_s < end_s && end_s <= duration_s))
      throw std::runtime_error(where + ": requires 0 <= start_s < end_s <= duration_s (got start=" +
                               std::to_string(start_s) + " end=" + std::to_string(end_s) +
                               " duration=" + std::to_string(duration_s) + ")");
  }
};

// ---- annotations: canonical JSON lines ------------------------------------

inline std::vector<AnnotationRecord> parse_annotations_jsonl(const std::string& text,
                                                             const std::string& origin) {
  std::vector<AnnotationRecord> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error(where + ": bad JSON: " + e.what());
    }
    AnnotationRecord r;
    try {
      r.video_id = j.at("video_id").get<std::string>();
      r.duration_s = j.at("duration_s").get<double>();
      r.start_s = j.at("start_s").get<double>();
      r.end_s = j.at("end_s").get<double>();
      r.query = j.at("query").get<std::string>();
    } catch (const std::exception& e) {
      throw std::runtime_error(where + ": missing or mistyped field: " + e.what());
    }
    r.validate(where);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string format_annotations_jsonl(const std::vector<AnnotationRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::json j;
    j["video_id"] = r.video_id;
    j["duration_s"] = r.duration_s;
    j["start_s"] = r.start_s;
    j["end_s"] = r.end_s;
    j["query"] = r.query;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path + ": cannot open");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw std::runtime_error(path + ": write failed");
}

inline std::vector<AnnotationRecord> load_annotations(const std::string& path) {
  return parse_annotations_jsonl(read_text_file(path), path);
}

inline void save_annotations(const std::string& path, const std::vector<AnnotationRecord>& recs) {
  write_text_file(path, format_annotations_jsonl(recs));
}

/// Charades-style release layout: "VID START END##sentence" per line, with
/// video durations supplied by a sidecar file holding "VID DURATION" lines.
inline std::vector<AnnotationRecord> load_annotations_charades(const std::string& path,
                                                               const std::string& durations_path) {
  std::map<std::string, double> durations;
  {
    std::istringstream in(read_text_file(durations_path));
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string id;
      double dur = 0.0;
      if (!(ls >> id >> dur))
        throw std::runtime_error(durations_path + ":" + std::to_string(lineno) + ": expected 'VID DURATION'");
      durations[id] = dur;
    }
  }
  std::vector<AnnotationRecord> out;
  std::istringstream in(read_text_file(path));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    const std::size_t sep = line.find("##");
    if (sep == std::string::npos) throw std::runtime_error(where + ": missing '##' separator");
    std::istringstream head(line.substr(0, sep));
    AnnotationRecord r;
    if (!(head >> r.video_id >> r.start_s >> r.end_s))
      throw std::runtime_error(where + ": expected 'VID START END' before '##'");
    r.query = line.substr(sep + 2);
    auto it = durations.find(r.video_id);
    if (it == durations.end())
      throw std::runtime_error(where + ": no duration for video " + r.video_id);
    r.duration_s = it->second;
    // Some release annotations run past the end of the video; clamp the tail.
    r.end_s = std::min(r.end_s, r.duration_s);
    r.validate(where);
    out.push_back(std::move(r));
  }
  return out;
}

// ---- clip feature container ------------------------------------------------

/// Per-video clip features with their grid header.
struct FeatureStore {
  ClipGrid grid;
  Tensor features;  // [clip_count, dim]
};

namespace detail {
template <typename T>
void put_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}
template <typename T>
T get_raw(const std::string& in, std::size_t& off, const std::string& path) {
  if (off + sizeof(T) > in.size())
    throw std::runtime_error(path + ": truncated at byte " + std::to_string(off));
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}
}  // namespace detail

/// MSTF binary layout (little-endian): magic "MSTF", u32 version = 1,
/// u32 clip_count, u32 dim, f32 clip_seconds, u32 frames_per_clip, then
/// clip_count*dim f32 values row-major.
inline void save_features(const std::string& path, const FeatureStore& fs) {
  if (fs.features.rank() != 2 || fs.features.dim(0) != fs.grid.num_clips)
    throw std::runtime_error(path + ": feature matrix rows must equal clip count");
  if (fs.features.dim(1) < 1) throw std::runtime_error(path + ": dim must be >= 1");
  if (!fs.features.all_finite()) throw std::runtime_error(path + ": non-finite feature values");
  std::string out;
  out += "MSTF";
  detail::put_raw<std::uint32_t>(out, 1);
  detail::put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(fs.grid.num_clips));
  detail::put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(fs.features.dim(1)));
  detail::put_raw<float>(out, static_cast<float>(fs.grid.clip_seconds));
  detail::put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(fs.grid.frames_per_clip));
  for (std::int64_t i = 0; i < fs.features.size(); ++i)
    detail::put_raw<float>(out, static_cast<float>(fs.features[i]));
  write_text_file(path, out);
}

inline FeatureStore load_features(const std::string& path) {
  const std::string in = read_text_file(path);
  std::size_t off = 0;
  if (in.size() < 4 || in.compare(0, 4, "MSTF") != 0)
    throw std::runtime_error(path + ": bad magic at byte 0 (expected MSTF)");
  off = 4;
  const auto version = detail::get_raw<std::uint32_t>(in, off, path);
  if (version != 1) throw std::runtime_error(path + ": unsupported version " + std::to_string(version));
  const auto clips = detail::get_raw<std::uint32_t>(in, off, path);
  const auto dim = detail::get_raw<std::uint32_t>(in, off, path);
  const auto clip_seconds = detail::get_raw<float>(in, off, path);
  const auto frames = detail::get_raw<std::uint32_t>(in, off, path);
  if (clips == 0) throw std::runtime_error(path + ": clip_count must be >= 1");
  if (dim == 0) throw std::runtime_error(path + ": dim must be >= 1");
  if (!(clip_seconds > 0.0f)) throw std::runtime_error(path + ": clip_seconds must be > 0");
  FeatureStore fs;
  fs.grid = {static_cast<int>(clips), static_cast<double>(clip_seconds), static_cast<int>(frames)};
  fs.features = Tensor({static_cast<std::int64_t>(clips), static_cast<std::int64_t>(dim)});
  for (std::int64_t i = 0; i < fs.features.size(); ++i) {
    const float v = detail::get_raw<float>(in, off, path);
    if (!std::isfinite(v))
      throw std::runtime_error(path + ": non-finite value at byte " + std::to_string(off - 4));
    fs.features[i] = static_cast<double>(v);
  }
  if (off != in.size())
    throw std::runtime_error(path + ": trailing bytes at " + std::to_string(off));
  return fs;
}

// ---- vocabulary and tokenization -------------------------------------------

/// Known words map to ids 0..W-1; anything else hashes into a reserved range
/// of oov_buckets ids at the end of the table.
struct Vocabulary {
  std::vector<std::string> words;
  std::map<std::string, int> index;
  int oov_buckets = 16;

  int table_size() const { return static_cast<int>(words.size()) + oov_buckets; }

  int id(const std::string& word) const {
    auto it = index.find(word);
    if (it != index.end()) return it->second;
    return static_cast<int>(words.size()) +
           static_cast<int>(fnv1a(word.data(), word.size()) % static_cast<std::uint64_t>(oov_buckets));
  }

  static Vocabulary from_words(std::vector<std::string> list, int oov = 16) {
    Vocabulary v;
    v.words = std::move(list);
    v.oov_buckets = oov;
    for (std::size_t i = 0; i < v.words.size(); ++i) {
      if (!v.index.emplace(v.words[i], static_cast<int>(i)).second)
        throw std::runtime_error("vocabulary: duplicate word " + v.words[i]);
    }
    return v;
  }

  /// Pure hashing table of the given size, for corpora without a word list.
  static Vocabulary hashed(int buckets) {
    Vocabulary v;
    v.oov_buckets = buckets;
    return v;
  }
};

inline void save_vocabulary(const std::string& path, const Vocabulary& v) {
  std::string out;
  for (const auto& w : v.words) {
    out += w;
    out += '\n';
  }
  write_text_file(path, out);
}

inline Vocabulary load_vocabulary(const std::string& path, int oov = 16) {
  std::istringstream in(read_text_file(path));
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) words.push_back(line);
  }
  return Vocabulary::from_words(std::move(words), oov);
}

/// Lowercases and splits on anything that is not a letter or digit.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const unsigned char u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur += static_cast<char>(std::tolower(u));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::vector<int> tokens_to_ids(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const auto& w : tokenize(text)) ids.push_back(vocab.id(w));
  if (ids.empty()) throw std::runtime_error("tokenize: query has no tokens: '" + text + "'");
  return ids;
}

// ---- configuration file ------------------------------------------------------

/// Flat key=value text. Recognized keys: H, N, K, A, kappa, L, d_v, d_f, d_s,
/// lr, batch, epochs, nms_iou, pool_or_conv, seed. Unknown keys are rejected.
inline ModelConfig parse_config_text(const std::string& text, const std::string& origin,
                                     ModelConfig base = ModelConfig{}) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::string stripped;
    for (char c : line)
      if (!std::isspace(static_cast<unsigned char>(c))) stripped += c;
    if (stripped.empty() || stripped[0] == '#') continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos) throw std::runtime_error(where + ": expected key=value");
    const std::string key = stripped.substr(0, eq);
    const std::string value = stripped.substr(eq + 1);
    auto as_int = [&](int& field) {
      try {
        std::size_t used = 0;
        field = std::stoi(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw std::runtime_error(where + ": bad integer '" + value + "'");
      }
    };
    auto as_double = [&](double& field) {
      try {
        std::size_t used = 0;
        field = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw std::runtime_error(where + ": bad number '" + value + "'");
      }
    };
    if (key == "H") as_int(base.hidden);
    else if (key == "N") as_int(base.window);
    else if (key == "K") as_int(base.scales);
    else if (key == "A") as_int(base.anchors);
    else if (key == "kappa") as_int(base.kernel);
    else if (key == "L") as_int(base.layers);
    else if (key == "d_v") as_int(base.d_v);
    else if (key == "d_f") as_int(base.d_f);
    else if (key == "d_s") as_int(base.d_s);
    else if (key == "lr") as_double(base.lr);
    else if (key == "batch") as_int(base.batch);
    else if (key == "epochs") as_int(base.epochs);
    else if (key == "nms_iou") as_double(base.nms_iou);
    else if (key == "seed") {
      try {
        base.seed = std::stoull(value);
      } catch (const std::exception&) {
        throw std::runtime_error(where + ": bad seed '" + value + "'");
      }
    } else if (key == "pool_or_conv") {
      if (value == "pool") base.extractor = ExtractorKind::Pool;
      else if (value == "conv") base.extractor = ExtractorKind::Conv;
      else throw std::runtime_error(where + ": pool_or_conv must be 'pool' or 'conv'");
    } else {
      throw std::runtime_error(where + ": unknown key '" + key + "'");
    }
  }
  base.validate();
  return base;
}

inline ModelConfig load_config(const std::string& path, ModelConfig base = ModelConfig{}) {
  return parse_config_text(read_text_file(path), path, base);
}

inline std::string format_config(const ModelConfig& c) {
  std::ostringstream out;
  out << "H=" << c.hidden << "\nN=" << c.window << "\nK=" << c.scales << "\nA=" << c.anchors
      << "\nkappa=" << c.kernel << "\nL=" << c.layers << "\nd_v=" << c.d_v << "\nd_f=" << c.d_f
      << "\nd_s=" << c.d_s << "\nlr=" << c.lr << "\nbatch=" << c.batch << "\nepochs=" << c.epochs
      << "\nnms_iou=" << c.nms_iou
      << "\npool_or_conv=" << (c.extractor == ExtractorKind::Pool ? "pool" : "conv")
      << "\nseed=" << c.seed << "\n";
  return out.str();
}

// ---- checkpoints --------------------------------------------------------------

struct Checkpoint {
  ModelConfig config;
  int d_raw = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;  // sorted by name
  std::vector<bool> trainable;
};

inline Checkpoint checkpoint_from_model(const Model& model) {
  Checkpoint ck;
  ck.config = model.cfg;
  ck.d_raw = model.d_raw();
  for (const auto& [name, var] : model.params.all()) {
    ck.tensors.emplace_back(name, var->value);
    ck.trainable.push_back(var->requires_grad);
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::string out;
  out += "M2DC";
  detail::put_raw<std::uint32_t>(out, 1);
  const ModelConfig& c = ck.config;
  for (int v : {c.hidden, c.window, c.scales, c.anchors, c.kernel, c.layers, c.d_v, c.d_f, c.d_s,
                c.vocab_size, c.lstm_layers, c.head_layers, ck.d_raw, c.batch, c.epochs})
    detail::put_raw<std::int32_t>(out, v);
  detail::put_raw<std::uint8_t>(out, c.use_batch_norm ? 1 : 0);
  detail::put_raw<std::uint8_t>(out, c.fusion_bias ? 1 : 0);
  detail::put_raw<std::uint8_t>(out, c.share_scale_params ? 1 : 0);
  detail::put_raw<std::uint8_t>(out, c.extractor == ExtractorKind::Conv ? 1 : 0);
  detail::put_raw<double>(out, c.lr);
  detail::put_raw<double>(out, c.nms_iou);
  detail::put_raw<std::uint64_t>(out, c.seed);
  detail::put_raw<std::uint64_t>(out, ck.tensors.size());
  for (std::size_t t = 0; t < ck.tensors.size(); ++t) {
    const auto& [name, tensor] = ck.tensors[t];
    detail::put_raw<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    detail::put_raw<std::uint8_t>(out, ck.trainable[t] ? 1 : 0);
    detail::put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (auto e : tensor.shape()) detail::put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (std::int64_t i = 0; i < tensor.size(); ++i) detail::put_raw<double>(out, tensor[i]);
  }
  write_text_file(path, out);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const std::string in = read_text_file(path);
  if (in.size() < 4 || in.compare(0, 4, "M2DC") != 0)
    throw std::runtime_error(path + ": bad magic at byte 0 (expected M2DC)");
  std::size_t off = 4;
  const auto version = detail::get_raw<std::uint32_t>(in, off, path);
  if (version != 1) throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ModelConfig& c = ck.config;
  for (int* v : {&c.hidden, &c.window, &c.scales, &c.anchors, &c.kernel, &c.layers, &c.d_v, &c.d_f,
                 &c.d_s, &c.vocab_size, &c.lstm_layers, &c.head_layers, &ck.d_raw, &c.batch,
                 &c.epochs})
    *v = detail::get_raw<std::int32_t>(in, off, path);
  c.use_batch_norm = detail::get_raw<std::uint8_t>(in, off, path) != 0;
  c.fusion_bias = detail::get_raw<std::uint8_t>(in, off, path) != 0;
  c.share_scale_params = detail::get_raw<std::uint8_t>(in, off, path) != 0;
  c.extractor = detail::get_raw<std::uint8_t>(in, off, path) ? ExtractorKind::Conv : ExtractorKind::Pool;
  c.lr = detail::get_raw<double>(in, off, path);
  c.nms_iou = detail::get_raw<double>(in, off, path);
  c.seed = detail::get_raw<std::uint64_t>(in, off, path);
  const auto count = detail::get_raw<std::uint64_t>(in, off, path);
  for (std::uint64_t t = 0; t < count; ++t) {
    const auto name_len = detail::get_raw<std::uint16_t>(in, off, path);
    if (off + name_len > in.size()) throw std::runtime_error(path + ": truncated name at byte " + std::to_string(off));
    std::string name(in.data() + off, name_len);
    off += name_len;
    const bool trainable = detail::get_raw<std::uint8_t>(in, off, path) != 0;
    const auto rank = detail::get_raw<std::uint32_t>(in, off, path);
    std::vector<std::int64_t> shape;
    std::int64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(detail::get_raw<std::uint32_t>(in, off, path));
      n *= shape.back();
    }
    Tensor tensor(shape);
    for (std::int64_t i = 0; i < n; ++i) tensor[i] = detail::get_raw<double>(in, off, path);
    ck.tensors.emplace_back(std::move(name), std::move(tensor));
    ck.trainable.push_back(trainable);
  }
  if (off != in.size()) throw std::runtime_error(path + ": trailing bytes at " + std::to_string(off));
  return ck;
}

/// Copies checkpoint tensors into an already constructed model. Every name
/// and shape must line up; mismatches are reported together.
inline void load_into_model(Model& model, const Checkpoint& ck) {
  std::string problems;
  std::size_t matched = 0;
  for (const auto& [name, tensor] : ck.tensors) {
    if (!model.params.has(name)) {
      problems += "  missing in model: " + name + "\n";
      continue;
    }
    Var v = model.params.get(name);
    if (v->value.shape() != tensor.shape()) {
      problems += "  shape mismatch: " + name + " model " + v->value.shape_str() + " vs checkpoint " +
                  tensor.shape_str() + "\n";
      continue;
    }
    v->value = tensor;
    ++matched;
  }
  if (matched != model.params.all().size()) {
    for (const auto& [name, var] : model.params.all()) {
      bool found = false;
      for (const auto& [ck_name, t] : ck.tensors) found = found || ck_name == name;
      if (!found) problems += "  missing in checkpoint: " + name + "\n";
    }
  }
  if (!problems.empty()) throw std::runtime_error("checkpoint does not match model:\n" + problems);
}

inline Model model_from_checkpoint(const Checkpoint& ck) {
  Rng rng(0);
  Model model(ck.config, ck.d_raw, rng);
  load_into_model(model, ck);
  return model;
}

// ---- datasets -------------------------------------------------------------------

struct DatasetVideo {
  std::string id;
  ClipGrid grid;
  Tensor features;  // [clips, d_raw]
};

struct DatasetSample {
  int video = 0;
  TimeInterval target;
  std::vector<int> token_ids;
  std::string query;
};

struct Dataset {
  std::vector<DatasetVideo> videos;
  std::map<std::string, int> video_index;
  std::vector<DatasetSample> samples;
  Vocabulary vocab;

  int feature_dim() const { return videos.empty() ? 0 : static_cast<int>(videos[0].features.dim(1)); }
};

/// Loads annotations plus one MSTF feature file per referenced video from
/// `features_dir/<video_id>.mstf`.
inline Dataset load_dataset(const std::string& annotations_path, const std::string& features_dir,
                            Vocabulary vocab) {
  Dataset ds;
  ds.vocab = std::move(vocab);
  for (const auto& rec : load_annotations(annotations_path)) {
    auto it = ds.video_index.find(rec.video_id);
    int vid;
    if (it == ds.video_index.end()) {
      FeatureStore fs = load_features((std::filesystem::path(features_dir) / (rec.video_id + ".mstf")).string());
      vid = static_cast<int>(ds.videos.size());
      ds.videos.push_back({rec.video_id, fs.grid, std::move(fs.features)});
      ds.video_index[rec.video_id] = vid;
    } else {
      vid = it->second;
    }
    DatasetSample s;
    s.video = vid;
    s.target = {rec.start_s, rec.end_s};
    s.query = rec.query;
    s.token_ids = tokens_to_ids(rec.query, ds.vocab);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace m2d
