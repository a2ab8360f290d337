#ifndef BGSPLIT_IO_HPP
#define BGSPLIT_IO_HPP

// On-disk formats:
//  * manifest   - JSON lines; line 1 is a header object, then one example per line
//  * checkpoint - one JSON document holding the training config and all parameters
//  * report     - JSON (config echo, per-class rows, aggregates) plus a flat CSV
// Doubles are written in shortest round-trip form, so write -> read -> write is
// byte-identical.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "bgsplit/dataset.hpp"
#include "bgsplit/error.hpp"
#include "bgsplit/metrics.hpp"
#include "bgsplit/model.hpp"
#include "bgsplit/trainer.hpp"

namespace bgsplit {

using Json = nlohmann::ordered_json;

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "io", "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "io", "cannot write '" + path + "'");
  out << content;
  if (!out) fail(ErrorKind::io, "io", "write to '" + path + "' failed");
}

template <typename T>
T get_field(const Json& j, const char* key, const char* module) {
  if (!j.contains(key)) fail(ErrorKind::ingestion, module, std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ingestion, module, std::string("field '") + key + "': " + e.what());
  }
}

}  // namespace detail

// ---- training config -------------------------------------------------------

inline Json to_json(const TrainConfig& c) {
  Json j;
  j["lambda_g"] = c.lambda_g;
  j["b0"] = c.b0;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["epochs"] = c.epochs;
  j["lr_step_epochs"] = c.lr_step_epochs;
  j["lr_gamma"] = c.lr_gamma;
  j["sampling"] = to_string(c.sampling);
  j["use_thresholding"] = c.use_thresholding;
  j["use_aux"] = c.use_aux;
  j["seed"] = c.seed;
  j["trunk_shape"] = c.trunk_shape;
  return j;
}

// Missing keys keep the values already in `base`.
inline TrainConfig train_config_from_json(const Json& j, TrainConfig base = {}) {
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = detail::get_field<std::decay_t<decltype(field)>>(j, key, "config");
  };
  take("lambda_g", base.lambda_g);
  take("b0", base.b0);
  take("batch_size", base.batch_size);
  take("learning_rate", base.learning_rate);
  take("momentum", base.momentum);
  take("weight_decay", base.weight_decay);
  take("epochs", base.epochs);
  take("lr_step_epochs", base.lr_step_epochs);
  take("lr_gamma", base.lr_gamma);
  if (j.contains("sampling")) base.sampling = parse_sampling(detail::get_field<std::string>(j, "sampling", "config"));
  take("use_thresholding", base.use_thresholding);
  take("use_aux", base.use_aux);
  take("seed", base.seed);
  take("trunk_shape", base.trunk_shape);
  base.validate();
  return base;
}

// ---- manifest --------------------------------------------------------------

inline std::string write_manifest_string(const DatasetManifest& m) {
  Json header;
  header["N"] = m.num_foreground;
  header["K"] = m.num_aux ? Json(*m.num_aux) : Json(nullptr);
  header["foreground_categories"] = m.foreground_categories;
  header["background_fraction"] = m.background_fraction;
  header["provenance"] = m.provenance;
  std::string out = header.dump() + "\n";
  for (const auto& e : m.examples) {
    Json j;
    j["id"] = e.id;
    j["features"] = e.features;
    j["original_label"] = e.original_label;
    j["main_label"] = e.main_label;
    j["aux_label"] = e.aux_label ? Json(*e.aux_label) : Json(nullptr);
    j["split"] = to_string(e.split);
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline DatasetManifest read_manifest_string(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  DatasetManifest m;
  bool have_header = false;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      detail::fail(ErrorKind::ingestion, "dataset", "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!have_header) {
      m.num_foreground = detail::get_field<std::size_t>(j, "N", "dataset");
      if (j.contains("K") && !j["K"].is_null()) m.num_aux = detail::get_field<std::size_t>(j, "K", "dataset");
      m.foreground_categories = detail::get_field<std::vector<std::string>>(j, "foreground_categories", "dataset");
      m.background_fraction = detail::get_field<double>(j, "background_fraction", "dataset");
      m.provenance = j.value("provenance", std::string{});
      have_header = true;
      continue;
    }
    Example e;
    e.id = detail::get_field<std::string>(j, "id", "dataset");
    e.features = detail::get_field<std::vector<double>>(j, "features", "dataset");
    e.original_label = detail::get_field<std::string>(j, "original_label", "dataset");
    e.main_label = detail::get_field<int>(j, "main_label", "dataset");
    if (j.contains("aux_label") && !j["aux_label"].is_null()) e.aux_label = detail::get_field<int>(j, "aux_label", "dataset");
    const auto split = detail::get_field<std::string>(j, "split", "dataset");
    if (split == "train") {
      e.split = Split::train;
    } else if (split == "test") {
      e.split = Split::test;
    } else {
      detail::fail(ErrorKind::ingestion, "dataset", "example '" + e.id + "' has unknown split '" + split + "'");
    }
    if (!ids.insert(e.id).second) detail::fail(ErrorKind::ingestion, "dataset", "duplicate example id '" + e.id + "'");
    detail::require_finite(e.features, "features");
    if (e.main_label < 0 || static_cast<std::size_t>(e.main_label) > m.num_foreground) {
      detail::fail(ErrorKind::ingestion, "dataset", "example '" + e.id + "' has main_label outside 0..N");
    }
    if (e.aux_label && (*e.aux_label < 1 || (m.num_aux && static_cast<std::size_t>(*e.aux_label) > *m.num_aux))) {
      detail::fail(ErrorKind::ingestion, "dataset", "example '" + e.id + "' has aux_label outside 1..K");
    }
    m.examples.push_back(std::move(e));
  }
  if (!have_header) detail::fail(ErrorKind::ingestion, "dataset", "manifest has no header line");
  if (m.foreground_categories.size() != m.num_foreground) {
    detail::fail(ErrorKind::ingestion, "dataset", "header N does not match the foreground category list");
  }
  const double recount = m.count_background_fraction();
  if (std::abs(recount - m.background_fraction) > 1e-12) {
    detail::fail(ErrorKind::ingestion, "dataset", "stored background_fraction disagrees with a recount of the examples");
  }
  return m;
}

inline void write_manifest(const DatasetManifest& m, const std::string& path) { detail::write_file(path, write_manifest_string(m)); }

inline DatasetManifest read_manifest(const std::string& path) { return read_manifest_string(detail::read_file(path)); }

// ---- checkpoint ------------------------------------------------------------

namespace detail {

inline Json layer_to_json(const DenseLayer& l) {
  Json j;
  j["rows"] = l.weight.rows;
  j["cols"] = l.weight.cols;
  j["weight"] = l.weight.data;
  j["bias"] = l.bias;
  return j;
}

inline DenseLayer layer_from_json(const Json& j) {
  DenseLayer l;
  l.weight.rows = get_field<std::size_t>(j, "rows", "checkpoint");
  l.weight.cols = get_field<std::size_t>(j, "cols", "checkpoint");
  l.weight.data = get_field<std::vector<double>>(j, "weight", "checkpoint");
  l.bias = get_field<std::vector<double>>(j, "bias", "checkpoint");
  if (l.weight.data.size() != l.weight.rows * l.weight.cols || l.bias.size() != l.weight.rows) {
    fail(ErrorKind::ingestion, "checkpoint", "layer shape does not match its data");
  }
  require_finite(l.weight.data, "checkpoint weights");
  require_finite(l.bias, "checkpoint biases");
  return l;
}

}  // namespace detail

struct Checkpoint {
  TrainConfig config;
  ModelParams params;

  bool operator==(const Checkpoint&) const = default;
};

inline std::string write_checkpoint_string(const Checkpoint& ck) {
  const ModelParams& p = ck.params;
  Json j;
  j["format"] = "bgsplit-checkpoint";
  j["version"] = 1;
  j["config"] = to_json(ck.config);
  Json params;
  params["input_dim"] = p.input_dim;
  params["num_foreground"] = p.num_foreground();
  params["num_aux"] = p.num_aux();
  params["clamp_background"] = p.clamp_background;
  params["b0"] = p.b0;
  Json trunk = Json::array();
  for (const auto& l : p.trunk) trunk.push_back(detail::layer_to_json(l));
  params["trunk"] = trunk;
  params["main_head"] = detail::layer_to_json(p.main_head);
  params["aux_head"] = detail::layer_to_json(p.aux_head);
  j["params"] = params;
  return j.dump() + "\n";
}

inline Checkpoint read_checkpoint_string(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    detail::fail(ErrorKind::ingestion, "checkpoint", e.what());
  }
  if (j.value("format", std::string{}) != "bgsplit-checkpoint") detail::fail(ErrorKind::ingestion, "checkpoint", "not a bgsplit checkpoint");
  Checkpoint ck;
  ck.config = train_config_from_json(j.at("config"));
  const Json& p = j.at("params");
  ck.params.input_dim = detail::get_field<std::size_t>(p, "input_dim", "checkpoint");
  ck.params.clamp_background = detail::get_field<bool>(p, "clamp_background", "checkpoint");
  ck.params.b0 = detail::get_field<double>(p, "b0", "checkpoint");
  for (const auto& l : p.at("trunk")) ck.params.trunk.push_back(detail::layer_from_json(l));
  ck.params.main_head = detail::layer_from_json(p.at("main_head"));
  ck.params.aux_head = detail::layer_from_json(p.at("aux_head"));

  std::size_t width = ck.params.input_dim;
  for (const auto& l : ck.params.trunk) {
    if (l.in_dim() != width) detail::fail(ErrorKind::ingestion, "checkpoint", "trunk layer dimensions do not chain");
    width = l.out_dim();
  }
  if (ck.params.main_head.in_dim() != width || ck.params.main_head.out_dim() < 2) {
    detail::fail(ErrorKind::ingestion, "checkpoint", "main head shape is inconsistent");
  }
  if (!ck.params.aux_head.empty() && ck.params.aux_head.in_dim() != width) {
    detail::fail(ErrorKind::ingestion, "checkpoint", "aux head shape is inconsistent");
  }
  return ck;
}

inline void write_checkpoint(const Checkpoint& ck, const std::string& path) { detail::write_file(path, write_checkpoint_string(ck)); }

inline Checkpoint read_checkpoint(const std::string& path) { return read_checkpoint_string(detail::read_file(path)); }

// ---- reports ---------------------------------------------------------------

inline Json to_json(const EvalReport& r, const Json& config_echo = Json::object()) {
  Json j;
  j["config"] = config_echo;
  Json rows = Json::array();
  for (const auto& c : r.classes) {
    Json row;
    row["class_id"] = c.class_id;
    row["AP"] = c.ap;
    row["F1"] = c.f1;
    row["precision"] = c.precision;
    row["recall"] = c.recall;
    row["support"] = c.support;
    rows.push_back(row);
  }
  j["classes"] = rows;
  j["mAP"] = r.map;
  j["meanF1"] = r.mean_f1;
  return j;
}

inline EvalReport report_from_json(const Json& j) {
  EvalReport r;
  for (const auto& row : j.at("classes")) {
    ClassMetrics c;
    c.class_id = detail::get_field<std::string>(row, "class_id", "metrics");
    c.ap = detail::get_field<double>(row, "AP", "metrics");
    c.f1 = detail::get_field<double>(row, "F1", "metrics");
    c.precision = detail::get_field<double>(row, "precision", "metrics");
    c.recall = detail::get_field<double>(row, "recall", "metrics");
    c.support = detail::get_field<std::size_t>(row, "support", "metrics");
    r.classes.push_back(std::move(c));
  }
  r.map = detail::get_field<double>(j, "mAP", "metrics");
  r.mean_f1 = detail::get_field<double>(j, "meanF1", "metrics");
  return r;
}

inline std::string write_report_string(const EvalReport& r, const Json& config_echo = Json::object()) {
  return to_json(r, config_echo).dump(2) + "\n";
}

// class_id,AP,F1,precision,recall,support with a final "mean" row.
inline std::string write_report_csv(const EvalReport& r) {
  std::string out = "class_id,AP,F1,precision,recall,support\n";
  char buf[256];
  std::size_t support = 0;
  for (const auto& c : r.classes) {
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f,%.6f,%zu\n", c.ap, c.f1, c.precision, c.recall, c.support);
    out += c.class_id + buf;
    support += c.support;
  }
  std::snprintf(buf, sizeof buf, "mean,%.6f,%.6f,%.6f,%.6f,%zu\n", r.map, r.mean_f1, r.mean_precision(), r.mean_recall(), support);
  out += buf;
  return out;
}

inline Json to_json(const TrainLog& log) {
  Json epochs = Json::array();
  for (const auto& e : log.epochs) {
    Json j;
    j["main_loss"] = e.main_loss;
    j["aux_loss"] = e.aux_loss;
    j["total_loss"] = e.total_loss;
    j["examples_seen"] = e.examples_seen;
    j["wall_seconds"] = e.wall_seconds;
    epochs.push_back(j);
  }
  return Json{{"epochs", epochs}};
}

// Writes to `path` via a temporary sibling and rename, so readers never see a partial file.
inline void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  detail::write_file(tmp, content);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) detail::fail(ErrorKind::io, "io", "cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
}

}  // namespace bgsplit

#endif  // BGSPLIT_IO_HPP
