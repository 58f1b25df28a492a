#pragma once

#include <string>
#include <vector>

#include "unlearn/adapters.hpp"
#include "unlearn/controller.hpp"
#include "unlearn/corpus.hpp"
#include "unlearn/trainer.hpp"

namespace unlearn {

// Directory layout for one end-to-end run:
//   corpus/ wal/ checkpoints/ ring/ adapters/ reports/ manifest.log
// Artifacts are content-addressed: the file name embeds a digest prefix.
class RunWorkspace {
 public:
  explicit RunWorkspace(std::string root);

  const std::string& root() const { return root_; }
  std::string corpus_dir() const { return root_ + "/corpus"; }
  std::string wal_dir() const { return root_ + "/wal"; }
  std::string checkpoints_dir() const { return root_ + "/checkpoints"; }
  std::string ring_dir() const { return root_ + "/ring"; }
  std::string adapters_dir() const { return root_ + "/adapters"; }
  std::string reports_dir() const { return root_ + "/reports"; }
  std::string manifest_log_path() const { return root_ + "/manifest.log"; }
  std::string run_meta_path() const { return root_ + "/run_meta.json"; }
  std::string corpus_meta_path() const { return corpus_dir() + "/corpus_meta.json"; }

  void ensure_dirs() const;

  // Writes `body` under dir as <stem>_<digest8>.<ext>; returns the path.
  std::string write_artifact(const std::string& dir, const std::string& stem,
                             const std::string& ext, const std::string& body) const;

  void save_corpus(const GeneratedCorpus& gen) const;
  Corpus load_corpus() const;
  CorpusMeta load_corpus_meta() const;

  void save_run_meta(const std::string& json) const;
  std::string load_run_meta() const;
  TrainConfig load_train_config() const;  // from run metadata, pin-checked fields included
  std::vector<SavedCheckpoint> checkpoint_catalog() const;  // from run metadata

 private:
  std::string root_;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& body);

}  // namespace unlearn
