#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "clickrefine/core/array.hpp"
#include "clickrefine/engine/tape.hpp"

namespace clickrefine {

/// Named parameters in insertion order, each flagged trainable or frozen.
template <typename T>
class BasicParamSet {
 public:
  struct Entry {
    std::string name;
    BasicArray<T> value;
    bool trainable = false;
  };

  void add(const std::string& name, BasicArray<T> value, bool trainable);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Entry& entry(const std::string& name) const;
  Entry& entry(const std::string& name);
  const BasicArray<T>& get(const std::string& name) const { return entry(name).value; }
  BasicArray<T>& get(const std::string& name) { return entry(name).value; }

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t trainable_scalars() const;

  enum class Subset { all, frozen, trainable };
  // FNV-1a over names, shapes and raw value bytes of the selected entries.
  std::uint64_t checksum(Subset subset = Subset::all) const;

  template <typename U>
  BasicParamSet<U> cast() const {
    BasicParamSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.trainable);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParamSet = BasicParamSet<float>;
using ParamSet64 = BasicParamSet<double>;

/// Trainable entries bound as tape leaves; frozen entries stay plain arrays.
template <typename T>
class ParamVars {
 public:
  ParamVars(Tape<T>& tape, const BasicParamSet<T>& params, bool track_gradients = true);

  // Leaf for a trainable entry, constant node for a frozen one.
  Var<T> operator()(const std::string& name) const;
  const BasicArray<T>& value(const std::string& name) const { return params_->get(name); }
  const BasicParamSet<T>& params() const noexcept { return *params_; }
  Tape<T>& tape() const noexcept { return *tape_; }

  // Leaves in ParamSet order for trainable entries (gradient readout).
  const std::unordered_map<std::string, Var<T>>& leaves() const noexcept { return leaves_; }

 private:
  Tape<T>* tape_;
  const BasicParamSet<T>* params_;
  std::unordered_map<std::string, Var<T>> leaves_;
  mutable std::unordered_map<std::string, Var<T>> constants_;
};

struct GradCheckOptions {
  double step = 1e-5;            // relative to max(1, |theta|)
  std::size_t max_samples = 32;  // per entry; entries at or below this size are checked fully
  double floor = 1e-6;           // denominator floor for relative error
  std::uint64_t seed = 7;
  // A coordinate whose central difference misses by more than this is tested
  // for a kink inside the step (see GradCheckEntry::nonsmooth).
  double tolerance = 1e-4;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  // Coordinates where the two one-sided slopes disagree and the analytic value
  // matches one of them: a piecewise-linear op (bilinear sampling) switches
  // cells inside the step. Excluded from the maxima above.
  std::size_t nonsmooth = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> entries;
};

using ScalarFn = std::function<Var<double>(Tape<double>&, const ParamVars<double>&)>;

// Reverse-mode gradient vs central differences for every trainable entry.
GradCheckReport grad_check(const ScalarFn& f, ParamSet64 params, const GradCheckOptions& options = {});

}  // namespace clickrefine
