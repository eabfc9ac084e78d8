#pragma once

// Checkpoints are directories: a JSON manifest (version, iteration, seed,
// config hash, per-blob digests) plus named-tensor blobs per module. Loads
// verify digests and reject version mismatches; a failed save removes the
// partial directory.

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>

#include "polytrace/training.hpp"

namespace polytrace {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

template <class R>
void write_named(std::ostream& f, const std::string& name, const Tensor<R>& t) {
  const std::uint32_t len = static_cast<std::uint32_t>(name.size());
  f.write(reinterpret_cast<const char*>(&len), 4);
  f.write(name.data(), len);
  write_tensor(f, t);
}

template <class R>
std::pair<std::string, Tensor<R>> read_named(std::istream& f) {
  std::uint32_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 4);
  if (!f || len > 4096) throw CheckpointError("corrupt blob: bad name length");
  std::string name(len, '\0');
  f.read(name.data(), len);
  return {name, read_tensor<R>(f)};
}

template <class R>
void save_param_blob(const std::string& path, const nn::ParamSet<R>& ps) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint blob: " + path);
  const std::uint32_t count =
      static_cast<std::uint32_t>(ps.params.size() + ps.buffers.size());
  f.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& [name, p] : ps.params) write_named(f, name, p->value);
  for (const auto& [name, t] : ps.buffers) write_named(f, "buf:" + name, *t);
  if (!f) throw IoError("short checkpoint write: " + path);
}

template <class R>
void load_param_blob(const std::string& path, const nn::ParamSet<R>& ps) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("missing checkpoint blob: " + path);
  std::uint32_t count = 0;
  f.read(reinterpret_cast<char*>(&count), 4);
  std::map<std::string, Tensor<R>> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = read_named<R>(f);
    entries.emplace(std::move(name), std::move(t));
  }
  auto take = [&](const std::string& name) -> Tensor<R> {
    auto it = entries.find(name);
    if (it == entries.end())
      throw CheckpointError("checkpoint blob " + path + " lacks tensor: " + name);
    Tensor<R> t = std::move(it->second);
    entries.erase(it);
    return t;
  };
  for (const auto& [name, p] : ps.params) {
    Tensor<R> t = take(name);
    if (t.shape != p->value.shape)
      throw CheckpointError("shape mismatch for " + name + " in " + path);
    p->value = std::move(t);
  }
  for (const auto& [name, buf] : ps.buffers) {
    Tensor<R> t = take("buf:" + name);
    if (t.shape != buf->shape)
      throw CheckpointError("shape mismatch for buffer " + name + " in " + path);
    *buf = std::move(t);
  }
  if (!entries.empty())
    throw CheckpointError("checkpoint blob " + path + " has unexpected tensor: " +
                          entries.begin()->first);
}

template <class R>
void save_adam_blob(const std::string& path, const nn::Adam<R>& opt) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint blob: " + path);
  const std::uint32_t count = static_cast<std::uint32_t>(opt.slots.size());
  f.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& s : opt.slots) {
    const std::uint32_t len = static_cast<std::uint32_t>(s.name.size());
    f.write(reinterpret_cast<const char*>(&len), 4);
    f.write(s.name.data(), len);
    const std::int64_t t = s.t;
    f.write(reinterpret_cast<const char*>(&t), 8);
    write_tensor(f, s.m);
    write_tensor(f, s.v);
  }
  if (!f) throw IoError("short checkpoint write: " + path);
}

template <class R>
void load_adam_blob(const std::string& path, nn::Adam<R>& opt) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("missing checkpoint blob: " + path);
  std::uint32_t count = 0;
  f.read(reinterpret_cast<char*>(&count), 4);
  if (count != opt.slots.size())
    throw CheckpointError("optimizer slot count mismatch in " + path);
  for (auto& s : opt.slots) {
    std::uint32_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 4);
    std::string name(len, '\0');
    f.read(name.data(), len);
    if (name != s.name)
      throw CheckpointError("optimizer slot order mismatch: expected " + s.name +
                            ", found " + name);
    std::int64_t t = 0;
    f.read(reinterpret_cast<char*>(&t), 8);
    s.t = t;
    s.m = read_tensor<R>(f);
    s.v = read_tensor<R>(f);
  }
}

inline std::string file_digest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot digest: " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[65536];
  while (f) {
    f.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<std::size_t>(f.gcount()), h);
  }
  return hex64(h);
}

template <class R>
void save_center_blob(const std::string& path, const CenterState<R>& centers) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint blob: " + path);
  const double rate = centers.update_rate;
  f.write(reinterpret_cast<const char*>(&rate), 8);
  for (int m = 0; m < 2; ++m)
    for (int c = 0; c < 2; ++c) {
      const std::uint8_t ready = centers.ready[m][c] ? 1 : 0;
      f.write(reinterpret_cast<const char*>(&ready), 1);
      Tensor<R> t = centers.ready[m][c] ? centers.center[m][c] : Tensor<R>({1}, R(0));
      write_tensor(f, t);
    }
  if (!f) throw IoError("short checkpoint write: " + path);
}

template <class R>
void load_center_blob(const std::string& path, CenterState<R>& centers) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("missing checkpoint blob: " + path);
  f.read(reinterpret_cast<char*>(&centers.update_rate), 8);
  for (int m = 0; m < 2; ++m)
    for (int c = 0; c < 2; ++c) {
      std::uint8_t ready = 0;
      f.read(reinterpret_cast<char*>(&ready), 1);
      auto t = read_tensor<R>(f);
      centers.ready[m][c] = ready != 0;
      if (ready) centers.center[m][c] = std::move(t);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------

template <class R>
void save_checkpoint(const std::string& dir, Models<R>& models, nn::Adam<R>* opt_g,
                     nn::Adam<R>* opt_d, std::int64_t iteration, std::uint64_t seed,
                     const std::string& cfg_hash) {
  namespace fs = std::filesystem;
  try {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory: " + dir);

    nn::ParamSet<R> gen_ps;
    models.gen.collect(gen_ps);
    nn::ParamSet<R> phi_ps;
    models.phi.collect(phi_ps);
    nn::ParamSet<R> disc_ps;
    models.bank.collect(disc_ps);
    nn::ParamSet<R> emb_ps;
    models.embedder.collect(emb_ps);

    detail::save_param_blob(dir + "/generator.bin", gen_ps);
    detail::save_param_blob(dir + "/classifier.bin", phi_ps);
    detail::save_param_blob(dir + "/discriminators.bin", disc_ps);
    detail::save_param_blob(dir + "/embedder.bin", emb_ps);
    detail::save_center_blob(dir + "/centers.bin", models.centers);
    if (opt_g) detail::save_adam_blob(dir + "/optim_g.bin", *opt_g);
    if (opt_d) detail::save_adam_blob(dir + "/optim_d.bin", *opt_d);

    nlohmann::json manifest;
    manifest["version"] = kCheckpointVersion;
    manifest["iteration"] = iteration;
    manifest["seed"] = seed;
    manifest["config_hash"] = cfg_hash;
    nlohmann::json digests;
    for (const char* name : {"generator.bin", "classifier.bin", "discriminators.bin",
                             "embedder.bin", "centers.bin"})
      digests[name] = detail::file_digest(dir + "/" + name);
    if (opt_g) digests["optim_g.bin"] = detail::file_digest(dir + "/optim_g.bin");
    if (opt_d) digests["optim_d.bin"] = detail::file_digest(dir + "/optim_d.bin");
    manifest["digests"] = digests;

    std::ofstream mf(dir + "/manifest.json");
    if (!mf) throw IoError("cannot write checkpoint manifest under: " + dir);
    mf << manifest.dump(2) << "\n";
    if (!mf) throw IoError("short manifest write under: " + dir);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(dir, ec);  // no partial checkpoints
    throw;
  }
}

struct CheckpointInfo {
  std::int64_t iteration = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

template <class R>
CheckpointInfo load_checkpoint(const std::string& dir, Models<R>& models,
                               nn::Adam<R>* opt_g = nullptr, nn::Adam<R>* opt_d = nullptr) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw CheckpointError("missing checkpoint manifest: " + dir + "/manifest.json");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const std::exception& e) {
    throw CheckpointError("corrupt checkpoint manifest: " + std::string(e.what()));
  }
  if (!manifest.contains("version") || manifest["version"].get<int>() != kCheckpointVersion)
    throw CheckpointError("checkpoint version mismatch: expected " +
                          std::to_string(kCheckpointVersion));

  for (auto it = manifest["digests"].begin(); it != manifest["digests"].end(); ++it) {
    const std::string actual = detail::file_digest(dir + "/" + it.key());
    if (actual != it.value().get<std::string>())
      throw CheckpointError("checkpoint digest mismatch for " + it.key());
  }

  nn::ParamSet<R> gen_ps;
  models.gen.collect(gen_ps);
  nn::ParamSet<R> phi_ps;
  models.phi.collect(phi_ps);
  nn::ParamSet<R> disc_ps;
  models.bank.collect(disc_ps);
  nn::ParamSet<R> emb_ps;
  models.embedder.collect(emb_ps);

  detail::load_param_blob(dir + "/generator.bin", gen_ps);
  detail::load_param_blob(dir + "/classifier.bin", phi_ps);
  detail::load_param_blob(dir + "/discriminators.bin", disc_ps);
  detail::load_param_blob(dir + "/embedder.bin", emb_ps);
  detail::load_center_blob(dir + "/centers.bin", models.centers);
  if (opt_g) detail::load_adam_blob(dir + "/optim_g.bin", *opt_g);
  if (opt_d) detail::load_adam_blob(dir + "/optim_d.bin", *opt_d);

  CheckpointInfo info;
  info.iteration = manifest.value("iteration", std::int64_t(0));
  info.seed = manifest.value("seed", std::uint64_t(0));
  info.config_hash = manifest.value("config_hash", std::string());
  return info;
}

// Named-tensor import for the optional pretrained-weights flags.
template <class R>
void load_weights_into(const std::string& path, const nn::ParamSet<R>& ps) {
  detail::load_param_blob(path, ps);
}

}  // namespace polytrace
