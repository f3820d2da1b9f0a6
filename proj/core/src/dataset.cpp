#include "bncde/dataset.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "bncde/errors.hpp"

namespace bncde::sim {

using nlohmann::json;

Arm arm_from_string(const std::string& s) {
  if (s == "sequential") return Arm::kSequential;
  if (s == "concurrent") return Arm::kConcurrent;
  throw std::invalid_argument("unknown treatment arm: '" + s + "'");
}

std::string to_string(Arm a) {
  return a == Arm::kSequential ? "sequential" : "concurrent";
}

std::vector<std::string> covariate_channel_names() {
  return {"count_chemo", "count_radio", "subgroup_0", "subgroup_1", "subgroup_2",
          "time"};
}

namespace {

std::string kind_name(int kind) { return kind == kChemo ? "chemo" : "radio"; }

int kind_from_name(const std::string& s) {
  if (s == "chemo") return kChemo;
  if (s == "radio") return kRadio;
  throw std::invalid_argument("unknown treatment kind: '" + s + "'");
}

json vec_to_json(const Vec& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

Vec vec_from_json(const json& j) {
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i];
  return v;
}

json mat_to_json(const Mat& m) {
  json out = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(i, c));
    out.push_back(std::move(row));
  }
  return out;
}

Mat mat_from_json(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(i, c) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
  return m;
}

json events_to_json(const std::vector<TreatmentEvent>& events) {
  json out = json::array();
  for (const auto& ev : events)
    out.push_back(json{{"day", ev.day}, {"kind", kind_name(ev.kind)}});
  return out;
}

std::vector<TreatmentEvent> events_from_json(const json& j) {
  std::vector<TreatmentEvent> events;
  for (const auto& e : j)
    events.push_back({e.at("day").get<double>(),
                      kind_from_name(e.at("kind").get<std::string>())});
  return events;
}

json targets_to_json(const std::vector<FutureTarget>& targets) {
  json out = json::array();
  for (const auto& t : targets)
    out.push_back(json{{"delta", t.delta}, {"observed", t.observed}, {"y", t.y}});
  return out;
}

std::vector<FutureTarget> targets_from_json(const json& j) {
  std::vector<FutureTarget> targets;
  for (const auto& t : j)
    targets.push_back({t.at("delta").get<int>(), t.at("y").get<double>(),
                       t.at("observed").get<int>()});
  return targets;
}

json params_to_json(const TumorParams& p) {
  return json{{"alpha_c", p.alpha_c}, {"alpha_r", p.alpha_r}, {"beta_r", p.beta_r},
              {"k", p.carrying_capacity}, {"rho", p.rho}};
}

TumorParams params_from_json(const json& j, int subgroup) {
  TumorParams p;
  p.alpha_c = j.at("alpha_c").get<double>();
  p.alpha_r = j.at("alpha_r").get<double>();
  p.beta_r = j.at("beta_r").get<double>();
  p.carrying_capacity = j.at("k").get<double>();
  p.rho = j.at("rho").get<double>();
  p.subgroup = subgroup;
  return p;
}

}  // namespace

std::string record_to_json_string(const PatientRecord& r) {
  json j{{"arm", to_string(r.arm)},
         {"id", r.id},
         {"obs_times", r.obs_times},
         {"params", params_to_json(r.params)},
         {"subgroup", r.subgroup},
         {"targets", targets_to_json(r.targets)},
         {"treatments", events_to_json(r.treatments)},
         {"x", mat_to_json(r.x)},
         {"y", vec_to_json(r.y)}};
  if (r.has_counterfactual) {
    j["counterfactual"] = json{{"arm", to_string(r.arm_cf)},
                               {"targets", targets_to_json(r.targets_cf)},
                               {"treatments", events_to_json(r.treatments_cf)},
                               {"x", mat_to_json(r.x_cf)},
                               {"y", vec_to_json(r.y_cf)}};
  }
  return j.dump();
}

namespace {
PatientRecord record_from_json(const json& j);
}

PatientRecord record_from_json_string(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed patient record: ") + e.what());
  }
  try {
    return record_from_json(j);
  } catch (const json::exception& e) {
    // Schema violations name the offending field in e.what().
    throw std::invalid_argument(std::string("invalid patient record: ") + e.what());
  }
}

namespace {

PatientRecord record_from_json(const json& j) {
  PatientRecord r;
  r.id = j.at("id").get<int>();
  r.subgroup = j.at("subgroup").get<int>();
  r.arm = arm_from_string(j.at("arm").get<std::string>());
  r.params = params_from_json(j.at("params"), r.subgroup);
  r.obs_times = j.at("obs_times").get<std::vector<double>>();
  r.y = vec_from_json(j.at("y"));
  r.x = mat_from_json(j.at("x"));
  r.treatments = events_from_json(j.at("treatments"));
  r.targets = targets_from_json(j.at("targets"));
  if (j.contains("counterfactual")) {
    const json& c = j.at("counterfactual");
    r.has_counterfactual = true;
    r.arm_cf = arm_from_string(c.at("arm").get<std::string>());
    r.y_cf = vec_from_json(c.at("y"));
    r.x_cf = mat_from_json(c.at("x"));
    r.treatments_cf = events_from_json(c.at("treatments"));
    r.targets_cf = targets_from_json(c.at("targets"));
  }
  if (r.obs_times.empty()) throw std::invalid_argument("patient record has no obs_times");
  return r;
}

}  // namespace

namespace {

json config_to_json(const SimConfig& c) {
  return json{{"chemo_dose", c.chemo_dose},
              {"gamma", c.gamma},
              {"growth_offset", c.growth_offset},
              {"h_sim", c.h_sim},
              {"n_test", c.n_test},
              {"n_train", c.n_train},
              {"n_val", c.n_val},
              {"noise_var", c.noise_var},
              {"radio_dose", c.radio_dose},
              {"reject_negative_kill", c.reject_negative_kill},
              {"seed", c.seed},
              {"volume_cap", c.volume_cap},
              {"volume_floor", c.volume_floor},
              {"y0_max", c.y0_max},
              {"y0_min", c.y0_min}};
}

SimConfig config_from_json(const json& j) {
  SimConfig c;
  c.chemo_dose = j.at("chemo_dose").get<double>();
  c.gamma = j.at("gamma").get<double>();
  c.growth_offset = j.at("growth_offset").get<double>();
  c.h_sim = j.at("h_sim").get<double>();
  c.n_test = j.at("n_test").get<int>();
  c.n_train = j.at("n_train").get<int>();
  c.n_val = j.at("n_val").get<int>();
  c.noise_var = j.at("noise_var").get<double>();
  c.radio_dose = j.at("radio_dose").get<double>();
  c.reject_negative_kill = j.at("reject_negative_kill").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.volume_cap = j.at("volume_cap").get<double>();
  c.volume_floor = j.at("volume_floor").get<double>();
  c.y0_max = j.at("y0_max").get<double>();
  c.y0_min = j.at("y0_min").get<double>();
  return c;
}

void write_split(const std::vector<PatientRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& r : records) out << record_to_json_string(r) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

std::vector<PatientRecord> read_split(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::vector<PatientRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    records.push_back(record_from_json_string(line));
  }
  return records;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  write_split(ds.train, dir + "/train.jsonl");
  write_split(ds.val, dir + "/val.jsonl");
  write_split(ds.test, dir + "/test.jsonl");

  json side{{"config", config_to_json(ds.config)},
            {"x_channels", covariate_channel_names()},
            {"x_mean", vec_to_json(ds.stats.x_mean)},
            {"x_std", vec_to_json(ds.stats.x_std)},
            {"y_mean", ds.stats.y_mean},
            {"y_std", ds.stats.y_std}};
  const std::string path = dir + "/standardization.json";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << side.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

Standardization load_standardization(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("malformed standardization file " + path + ": " +
                                e.what());
  }
  Standardization st;
  st.y_mean = j.at("y_mean").get<double>();
  st.y_std = j.at("y_std").get<double>();
  st.x_mean = vec_from_json(j.at("x_mean"));
  st.x_std = vec_from_json(j.at("x_std"));
  return st;
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  ds.train = read_split(dir + "/train.jsonl");
  ds.val = read_split(dir + "/val.jsonl");
  ds.test = read_split(dir + "/test.jsonl");
  ds.stats = load_standardization(dir + "/standardization.json");

  std::ifstream in(dir + "/standardization.json", std::ios::binary);
  json j;
  in >> j;
  if (j.contains("config")) ds.config = config_from_json(j.at("config"));
  return ds;
}

}  // namespace bncde::sim
