#pragma once

#include <algorithm>
#include <deque>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <vector>

#include "ctrlflow/core/blob.hpp"
#include "ctrlflow/core/rng.hpp"
#include "ctrlflow/env/trajectory.hpp"

namespace ctrlflow::env {

/// FIFO ring of transitions with episode boundaries. One writer, many
/// readers: const members take a shared lock and see a consistent state.
class ReplayBuffer {
 public:
  struct Segment {
    long episode = 0;
    long first = 0;  ///< Sequence number of the first stored transition.
    long length = 0;
    bool open = false;
  };

  explicit ReplayBuffer(long capacity = 100000, std::uint64_t stream = 0)
      : capacity_(capacity), stream_(stream) {
    if (capacity < 1) throw ConfigError("buffer capacity must be >= 1");
    ring_.resize(static_cast<std::size_t>(capacity));
  }

  ReplayBuffer(const ReplayBuffer& other) { copy_from(other); }
  ReplayBuffer& operator=(const ReplayBuffer& other) {
    if (this != &other) copy_from(other);
    return *this;
  }

  long capacity() const { return capacity_; }
  std::uint64_t stream() const { return stream_; }

  long size() const {
    std::shared_lock lock(mutex_);
    return count_;
  }

  long valid_count() const {
    std::shared_lock lock(mutex_);
    return valid_;
  }

  long episodes() const {
    std::shared_lock lock(mutex_);
    return static_cast<long>(segments_.size());
  }

  std::vector<Segment> segments() const {
    std::shared_lock lock(mutex_);
    return {segments_.begin(), segments_.end()};
  }

  /// i = 0 is the oldest stored transition.
  Transition at(long i) const {
    std::shared_lock lock(mutex_);
    if (i < 0 || i >= count_) throw DomainError("buffer index out of range");
    return slot(first_seq_ + i);
  }

  /// Appends to the open episode, starting one if needed.
  void add(const Transition& tr) {
    std::unique_lock lock(mutex_);
    add_locked(tr);
  }

  void end_episode() {
    std::unique_lock lock(mutex_);
    if (!segments_.empty()) segments_.back().open = false;
  }

  /// Stores a whole trajectory as its own closed episode.
  void add_trajectory(const Trajectory& traj) {
    std::unique_lock lock(mutex_);
    if (!segments_.empty()) segments_.back().open = false;
    for (const Transition& tr : traj.transitions) add_locked(tr);
    if (!segments_.empty()) segments_.back().open = false;
  }

  /// Contiguous length-h slice of one stored episode, start offset uniform
  /// over all valid offsets. `recent_episodes` > 0 restricts the draw to the
  /// newest episodes.
  Trajectory sample_trajectory(int h, Rng& rng, long recent_episodes = 0) const {
    if (h < 1) throw DomainError("trajectory length must be >= 1");
    std::shared_lock lock(mutex_);
    const std::size_t from =
        recent_episodes > 0 && static_cast<std::size_t>(recent_episodes) < segments_.size()
            ? segments_.size() - static_cast<std::size_t>(recent_episodes)
            : 0;
    long total = 0;
    for (std::size_t k = from; k < segments_.size(); ++k) total += std::max(0L, segments_[k].length - h + 1);
    if (total == 0) {
      throw NotReadyError("no stored episode segment of length " + std::to_string(h));
    }
    long pick = rng.uniform_int(0, total - 1);
    for (std::size_t k = from; k < segments_.size(); ++k) {
      const long n = std::max(0L, segments_[k].length - h + 1);
      if (pick < n) {
        Trajectory t;
        t.transitions.reserve(static_cast<std::size_t>(h));
        for (long j = 0; j < h; ++j) t.transitions.push_back(slot(segments_[k].first + pick + j));
        return t;
      }
      pick -= n;
    }
    throw NotReadyError("sampling fell through");  // unreachable
  }

  std::vector<Trajectory> sample_trajectories(int h, int n, Rng& rng, long recent_episodes = 0) const {
    std::vector<Trajectory> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(sample_trajectory(h, rng, recent_episodes));
    return out;
  }

  /// Uniform draw over transitions with valid_flag set.
  std::vector<Transition> sample_transitions(int n, Rng& rng) const {
    std::shared_lock lock(mutex_);
    if (valid_ == 0) throw NotReadyError("buffer holds no valid transitions");
    std::vector<Transition> out;
    out.reserve(static_cast<std::size_t>(n));
    while (static_cast<int>(out.size()) < n) {
      const Transition& tr = slot(first_seq_ + rng.uniform_int(0, count_ - 1));
      if (tr.valid) out.push_back(tr);
    }
    return out;
  }

  /// Episodes in storage order; the oldest may be partially evicted.
  std::vector<Trajectory> episode_list() const {
    std::shared_lock lock(mutex_);
    std::vector<Trajectory> out;
    for (const Segment& s : segments_) {
      Trajectory t;
      for (long j = 0; j < s.length; ++j) t.transitions.push_back(slot(s.first + j));
      out.push_back(std::move(t));
    }
    return out;
  }

  void clear() {
    std::unique_lock lock(mutex_);
    segments_.clear();
    count_ = valid_ = 0;
    first_seq_ = 0;
  }

  void save(BlobWriter& w, const std::string& prefix) const {
    std::shared_lock lock(mutex_);
    w.put_ints(prefix + ".meta", {capacity_, count_, first_seq_, next_episode_, static_cast<std::int64_t>(stream_),
                                  d_s_, d_a_});
    const long ds = std::max<long>(d_s_, 0), da = std::max<long>(d_a_, 0);
    Matrix s(ds, count_), a(da, count_), ns(ds, count_);
    std::vector<double> r(static_cast<std::size_t>(count_));
    std::vector<std::int64_t> flags(static_cast<std::size_t>(count_));
    for (long i = 0; i < count_; ++i) {
      const Transition& tr = slot(first_seq_ + i);
      s.col(i) = tr.state;
      a.col(i) = tr.action;
      ns.col(i) = tr.next_state;
      r[static_cast<std::size_t>(i)] = tr.reward;
      flags[static_cast<std::size_t>(i)] = (tr.done ? 1 : 0) | (tr.valid ? 2 : 0);
    }
    w.put_matrix(prefix + ".state", s);
    w.put_matrix(prefix + ".action", a);
    w.put_matrix(prefix + ".next_state", ns);
    w.put_reals(prefix + ".reward", r);
    w.put_ints(prefix + ".flags", flags);
    std::vector<std::int64_t> seg;
    for (const Segment& g : segments_) {
      seg.insert(seg.end(), {g.episode, g.first, g.length, g.open ? 1 : 0});
    }
    w.put_ints(prefix + ".segments", seg);
  }

  static ReplayBuffer load(const BlobReader& r, const std::string& prefix) {
    const auto meta = r.get_ints(prefix + ".meta");
    if (meta.size() != 7) throw IoError("bad replay buffer header");
    ReplayBuffer b(meta[0], static_cast<std::uint64_t>(meta[4]));
    const long count = meta[1];
    b.d_s_ = meta[5];
    b.d_a_ = meta[6];
    b.next_episode_ = meta[3];
    b.first_seq_ = meta[2];
    const Matrix s = r.get_matrix(prefix + ".state");
    const Matrix a = r.get_matrix(prefix + ".action");
    const Matrix ns = r.get_matrix(prefix + ".next_state");
    const auto rew = r.get_reals(prefix + ".reward");
    const auto flags = r.get_ints(prefix + ".flags");
    if (s.cols() != count || rew.size() != static_cast<std::size_t>(count)) throw IoError("bad replay buffer body");
    for (long i = 0; i < count; ++i) {
      Transition& tr = b.slot_mut(b.first_seq_ + i);
      tr.state = s.col(i);
      tr.action = a.col(i);
      tr.next_state = ns.col(i);
      tr.reward = rew[static_cast<std::size_t>(i)];
      tr.done = (flags[static_cast<std::size_t>(i)] & 1) != 0;
      tr.valid = (flags[static_cast<std::size_t>(i)] & 2) != 0;
      if (tr.valid) ++b.valid_;
    }
    b.count_ = count;
    const auto seg = r.get_ints(prefix + ".segments");
    for (std::size_t k = 0; k + 3 < seg.size(); k += 4) {
      b.segments_.push_back({seg[k], seg[k + 1], seg[k + 2], seg[k + 3] != 0});
    }
    return b;
  }

 private:
  const Transition& slot(long seq) const { return ring_[static_cast<std::size_t>(seq % capacity_)]; }
  Transition& slot_mut(long seq) { return ring_[static_cast<std::size_t>(seq % capacity_)]; }

  void add_locked(const Transition& tr) {
    if (d_s_ < 0) {
      d_s_ = tr.state.size();
      d_a_ = tr.action.size();
    }
    if (tr.state.size() != d_s_ || tr.action.size() != d_a_ || tr.next_state.size() != d_s_) {
      throw ConfigError("transition shape does not match buffer");
    }
    if (count_ == capacity_) evict_oldest();
    if (segments_.empty() || !segments_.back().open) {
      segments_.push_back({next_episode_++, first_seq_ + count_, 0, true});
    }
    slot_mut(first_seq_ + count_) = tr;
    ++count_;
    if (tr.valid) ++valid_;
    ++segments_.back().length;
  }

  void evict_oldest() {
    if (slot(first_seq_).valid) --valid_;
    ++first_seq_;
    --count_;
    Segment& s = segments_.front();
    ++s.first;
    if (--s.length == 0) segments_.pop_front();
  }

  void copy_from(const ReplayBuffer& other) {
    std::shared_lock lock(other.mutex_);
    capacity_ = other.capacity_;
    stream_ = other.stream_;
    ring_ = other.ring_;
    segments_ = other.segments_;
    count_ = other.count_;
    valid_ = other.valid_;
    first_seq_ = other.first_seq_;
    next_episode_ = other.next_episode_;
    d_s_ = other.d_s_;
    d_a_ = other.d_a_;
  }

  long capacity_ = 1;
  std::uint64_t stream_ = 0;
  std::vector<Transition> ring_;
  std::deque<Segment> segments_;
  long count_ = 0;
  long valid_ = 0;
  long first_seq_ = 0;
  long next_episode_ = 0;
  long d_s_ = -1;
  long d_a_ = -1;
  mutable std::shared_mutex mutex_;
};

}  // namespace ctrlflow::env
