#include "garfont/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <unordered_map>

#include "garfont/common.hpp"
#include "garfont/image_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace garfont::ckpt {

namespace {

void snap_to_f32(std::vector<double>& v) {
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

void write_f32(std::ofstream& f, const std::vector<double>& v) {
  std::vector<float> buf(v.size());
  for (size_t i = 0; i < v.size(); ++i) buf[i] = static_cast<float>(v[i]);
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

void read_f32(std::ifstream& f, int64_t offset, std::vector<double>& v) {
  f.seekg(offset);
  std::vector<float> buf(v.size());
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw DiagnosticError("checkpoint: truncated weights.bin");
  for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(buf[i]);
}

json shape_json(const Shape& s) {
  json a = json::array();
  for (int d : s.dims) a.push_back(d);
  return a;
}

}  // namespace

void save_checkpoint(const std::string& dir, nn::ParamStore& params,
                     nn::Adam* opt, const CheckpointMeta& meta) {
  fs::create_directories(dir);
  json tensors = json::array();
  int64_t offset = 0;

  auto record = [&](const std::string& name, const Shape& shape,
                    int64_t numel) {
    tensors.push_back(
        {{"name", name}, {"shape", shape_json(shape)}, {"offset", offset}});
    offset += numel * static_cast<int64_t>(sizeof(float));
  };

  // snap in-memory state so training continues from exactly what is written
  for (auto& [name, t] : params.items()) {
    snap_to_f32(t.data());
    record(name, t.shape(), t.numel());
  }
  if (opt) {
    for (size_t i = 0; i < params.items().size(); ++i) {
      auto& [name, t] = params.items()[i];
      snap_to_f32(opt->m()[i]);
      snap_to_f32(opt->v()[i]);
      record("opt.m/" + name, t.shape(), t.numel());
      record("opt.v/" + name, t.shape(), t.numel());
    }
  }

  std::ofstream wf(fs::path(dir) / "weights.bin", std::ios::binary);
  if (!wf) throw DiagnosticError("cannot write weights.bin under " + dir);
  for (auto& [name, t] : params.items()) write_f32(wf, t.data());
  if (opt) {
    for (size_t i = 0; i < params.items().size(); ++i) {
      write_f32(wf, opt->m()[i]);
      write_f32(wf, opt->v()[i]);
    }
  }
  wf.close();

  json j{{"version", meta.version},
         {"step", meta.step},
         {"opt_step", opt ? opt->step_count() : meta.opt_step},
         {"rng_state", meta.rng_state},
         {"config_hash", meta.config_hash},
         {"extra", meta.extra.is_null() ? json::object() : meta.extra},
         {"tensors", tensors}};
  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw DiagnosticError("cannot write manifest.json under " + dir);
  mf << j.dump(2) << "\n";
}

CheckpointMeta load_checkpoint(const std::string& dir, nn::ParamStore& params,
                               nn::Adam* opt) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf)
    throw DiagnosticError("checkpoint manifest missing under " + dir);
  json j = json::parse(mf);

  std::ifstream wf(fs::path(dir) / "weights.bin", std::ios::binary);
  if (!wf) throw DiagnosticError("weights.bin missing under " + dir);

  // index by name
  std::unordered_map<std::string, std::pair<int64_t, std::vector<int>>> index;
  for (const auto& t : j.at("tensors")) {
    index[t.at("name").get<std::string>()] = {
        t.at("offset").get<int64_t>(), t.at("shape").get<std::vector<int>>()};
  }

  for (auto& [name, t] : params.items()) {
    auto it = index.find(name);
    if (it == index.end())
      throw DiagnosticError("checkpoint: tensor " + name + " not in " + dir);
    if (Shape(it->second.second) != t.shape())
      throw DiagnosticError("checkpoint: shape mismatch for " + name);
    read_f32(wf, it->second.first, t.data());
  }
  if (opt) {
    while (opt->m().size() < params.items().size()) {
      const auto& t = params.items()[opt->m().size()].second;
      opt->m().emplace_back(t.numel(), 0.0);
      opt->v().emplace_back(t.numel(), 0.0);
    }
    for (size_t i = 0; i < params.items().size(); ++i) {
      const auto& name = params.items()[i].first;
      auto im = index.find("opt.m/" + name);
      auto iv = index.find("opt.v/" + name);
      if (im != index.end()) read_f32(wf, im->second.first, opt->m()[i]);
      if (iv != index.end()) read_f32(wf, iv->second.first, opt->v()[i]);
    }
    opt->set_step_count(j.at("opt_step").get<int64_t>());
  }

  CheckpointMeta meta;
  meta.version = j.at("version");
  meta.step = j.at("step");
  meta.opt_step = j.at("opt_step");
  meta.rng_state = j.at("rng_state");
  meta.config_hash = j.at("config_hash");
  meta.extra = j.value("extra", json::object());
  return meta;
}

CheckpointMeta peek_checkpoint(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw DiagnosticError("checkpoint manifest missing under " + dir);
  json j = json::parse(mf);
  CheckpointMeta meta;
  meta.version = j.at("version");
  meta.step = j.at("step");
  meta.opt_step = j.at("opt_step");
  meta.rng_state = j.at("rng_state");
  meta.config_hash = j.at("config_hash");
  meta.extra = j.value("extra", json::object());
  return meta;
}

bool checkpoint_exists(const std::string& dir) {
  return fs::exists(fs::path(dir) / "manifest.json") &&
         fs::exists(fs::path(dir) / "weights.bin");
}

std::string checkpoint_weights_hash(const std::string& dir) {
  return sha256_file((fs::path(dir) / "weights.bin").string());
}

}  // namespace garfont::ckpt
