#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "maggen/rng.hpp"
#include "maggen/tensor.hpp"

namespace maggen {

struct Sample {
  std::vector<double> features;
  int label = 0;
  int domain = 0;
};

enum class SplitTag : uint8_t { Train = 0, Val = 1, Test = 2 };

// Test hook: counts reads of a dataset's splits so the evaluation protocol
// can prove a held-out domain was never touched during training.
struct AccessProbe {
  virtual ~AccessProbe() = default;
  virtual void on_read(int domain, SplitTag split) const = 0;
};

struct DomainDataset {
  int domain_id = 0;
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
  const AccessProbe* probe = nullptr;

  // All library code goes through these so probes see every access.
  const std::vector<Sample>& split(SplitTag tag) const {
    if (probe) probe->on_read(domain_id, tag);
    switch (tag) {
      case SplitTag::Train: return train;
      case SplitTag::Val: return val;
      default: return test;
    }
  }
  const std::vector<Sample>& train_set() const { return split(SplitTag::Train); }
  const std::vector<Sample>& val_set() const { return split(SplitTag::Val); }
  const std::vector<Sample>& test_set() const { return split(SplitTag::Test); }
};

struct DatasetBundle {
  int num_classes = 0;
  int input_dim = 0;
  std::vector<DomainDataset> domains;
};

// One mini-batch. `domains` carries the per-row domain id so pooled batches
// keep their provenance.
struct Batch {
  int domain = -1;
  Tensor inputs;  // N x input_dim
  std::vector<int> labels;
  std::vector<int> domains;
};

// Indices into a batch list: (batch, row) for anchor / positive / negative.
struct Triplet {
  int a_batch, a_row;
  int p_batch, p_row;
  int n_batch, n_row;
};

// Synthetic multi-scale dataset: each class is a sinusoidal grating with a
// class-specific frequency band, orientation and phase; each domain renders
// the same texture with its frequency scale factor plus pixel noise.
struct SyntheticSpec {
  int domains = 4;
  int classes = 8;
  int per_class = 250;  // samples per (class, domain)
  int patch = 8;        // patch side length; input_dim = patch^2
  double noise = 0.1;
  std::vector<double> scales = {1.0, 1.25, 1.55, 1.9};
  uint64_t seed = 7;

  void validate() const;
};

DatasetBundle generate_synthetic(const SyntheticSpec& spec);

// Per-class stratified shuffle, then a largest-remainder 45/45/10 allocation.
std::array<std::vector<Sample>, 3> split_45_45_10(const std::vector<Sample>& samples,
                                                  uint64_t seed);

// Maps labels through a class -> superclass table and re-derives the class
// count (e.g. eight tumor types down to a binary malignancy task).
DatasetBundle relabel(const DatasetBundle& bundle, const std::vector<int>& class_map);

// MDT dataset file: "MDT1" magic; u32 version, u32 domain count, u32 class
// count, u32 input_dim, u64 sample count; per sample u8 domain, u16 label,
// u8 split tag and input_dim little-endian doubles; trailing CRC-32 of the
// sample payload.
void save_mdt(const DatasetBundle& bundle, const std::string& path);
DatasetBundle load_mdt(const std::string& path);

// Import: a manifest of "path label domain" lines naming raw little-endian
// double vectors, split 45/45/10 per domain.
DatasetBundle import_manifest(const std::string& manifest_path, uint64_t split_seed);

// Shuffled without-replacement batches; the last short batch of an epoch is
// kept, and each epoch reshuffles.
class BatchStream {
 public:
  BatchStream(std::vector<const Sample*> samples, int64_t batch_size, int domain, Rng rng);

  Batch next();
  int64_t epoch_size() const { return static_cast<int64_t>(samples_.size()); }

 private:
  std::vector<const Sample*> samples_;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
  int64_t batch_size_;
  int domain_;
  Rng rng_;

  void reshuffle();
};

Batch make_batch(const std::vector<const Sample*>& samples, int domain);

// R triplets over the pooled rows of `batches`: anchor uniform, positive from
// the anchor's class preferring a different domain, negative from any other
// class.
std::vector<Triplet> sample_triplets(const std::vector<Batch>& batches, int64_t r, Rng& rng);

}  // namespace maggen
