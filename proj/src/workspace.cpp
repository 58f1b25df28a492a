#include "unlearn/workspace.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "unlearn/errors.hpp"
#include "unlearn/hashing.hpp"

namespace fs = std::filesystem;

namespace unlearn {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_file: cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& body) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("write_file: cannot open " + path);
  f.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!f) throw IoError("write_file: write failed " + path);
}

RunWorkspace::RunWorkspace(std::string root) : root_(std::move(root)) {}

void RunWorkspace::ensure_dirs() const {
  for (const std::string& d : {corpus_dir(), wal_dir(), checkpoints_dir(), ring_dir(),
                               adapters_dir(), reports_dir()}) {
    fs::create_directories(d);
  }
}

std::string RunWorkspace::write_artifact(const std::string& dir, const std::string& stem,
                                         const std::string& ext, const std::string& body) const {
  fs::create_directories(dir);
  std::string digest = sha256_hex(body.data(), body.size()).substr(0, 8);
  std::string path = dir + "/" + stem + "_" + digest + "." + ext;
  write_file(path, body);
  return path;
}

void RunWorkspace::save_corpus(const GeneratedCorpus& gen) const {
  ensure_dirs();
  gen.corpus.save(corpus_dir() + "/corpus.bin");
  write_file(corpus_meta_path(), gen.meta.to_json());
}

Corpus RunWorkspace::load_corpus() const { return Corpus::load(corpus_dir() + "/corpus.bin"); }

CorpusMeta RunWorkspace::load_corpus_meta() const {
  return CorpusMeta::from_json(read_file(corpus_meta_path()));
}

void RunWorkspace::save_run_meta(const std::string& json) const {
  write_file(run_meta_path(), json);
}

std::string RunWorkspace::load_run_meta() const { return read_file(run_meta_path()); }

TrainConfig RunWorkspace::load_train_config() const {
  nlohmann::json j = nlohmann::json::parse(load_run_meta());
  return TrainConfig::from_json(j.at("config").dump());
}

std::vector<SavedCheckpoint> RunWorkspace::checkpoint_catalog() const {
  nlohmann::json j = nlohmann::json::parse(load_run_meta());
  std::vector<SavedCheckpoint> out;
  for (const auto& c : j.at("checkpoints")) {
    SavedCheckpoint ck{c.at("step"), c.at("path")};
    if (!fs::exists(ck.path)) {
      // recorded relative to a different cwd: resolve against the workspace
      std::string name = fs::path(ck.path).filename().string();
      ck.path = checkpoints_dir() + "/" + name;
    }
    out.push_back(std::move(ck));
  }
  return out;
}

}  // namespace unlearn
