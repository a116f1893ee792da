#pragma once

// Versioned canonical-text container used for every checkpoint.
//
//   ctrlflow-blob 1
//   <key> i <n> <int>...
//   <key> f <n> <hexfloat>...
//   <key> m <rows> <cols> <hexfloat>...   (column-major)
//   <key> s <byte-count> <raw bytes>
//
// Reals are written as hexadecimal floating point so every value
// round-trips bitwise.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ctrlflow/core/errors.hpp"

namespace ctrlflow {

inline constexpr int kBlobVersion = 1;

namespace detail {

inline std::string hex_real(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::hex);
  return std::string(buf, res.ptr);
}

inline double parse_hex_real(const std::string& tok) {
  double x = 0.0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  bool neg = false;
  if (first != last && *first == '-') {
    neg = true;
    ++first;
  }
  auto res = std::from_chars(first, last, x, std::chars_format::hex);
  if (res.ec != std::errc() || res.ptr != last) {
    throw IoError("malformed real '" + tok + "' in blob");
  }
  return neg ? -x : x;
}

}  // namespace detail

class BlobWriter {
 public:
  void put_int(const std::string& key, std::int64_t v) { put_ints(key, {v}); }
  void put_ints(const std::string& key, const std::vector<std::int64_t>& v) {
    std::ostringstream os;
    os << key << " i " << v.size();
    for (auto x : v) os << ' ' << x;
    lines_.push_back(os.str());
  }
  void put_real(const std::string& key, double v) { put_reals(key, {v}); }
  void put_reals(const std::string& key, const std::vector<double>& v) {
    std::ostringstream os;
    os << key << " f " << v.size();
    for (double x : v) os << ' ' << detail::hex_real(x);
    lines_.push_back(os.str());
  }
  void put_vector(const std::string& key, const Eigen::VectorXd& v) {
    put_reals(key, std::vector<double>(v.data(), v.data() + v.size()));
  }
  void put_matrix(const std::string& key, const Eigen::MatrixXd& m) {
    std::ostringstream os;
    os << key << " m " << m.rows() << ' ' << m.cols();
    for (Eigen::Index i = 0; i < m.size(); ++i) os << ' ' << detail::hex_real(m.data()[i]);
    lines_.push_back(os.str());
  }
  void put_string(const std::string& key, const std::string& s) {
    std::ostringstream os;
    os << key << " s " << s.size() << ' ' << s;
    lines_.push_back(os.str());
  }

  std::string str() const {
    std::ostringstream os;
    os << "ctrlflow-blob " << kBlobVersion << '\n';
    for (const auto& l : lines_) os << l << '\n';
    return os.str();
  }
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << str();
    if (!out) throw IoError("write failed for '" + path + "'");
  }

 private:
  std::vector<std::string> lines_;
};

class BlobReader {
 public:
  static BlobReader parse(const std::string& text) {
    BlobReader r;
    std::istringstream is(text);
    std::string magic;
    int version = 0;
    is >> magic >> version;
    if (magic != "ctrlflow-blob") throw IoError("not a ctrlflow blob");
    if (version != kBlobVersion) {
      throw IoError("unsupported blob version " + std::to_string(version));
    }
    std::string key;
    while (is >> key) {
      Entry e;
      is >> e.kind;
      if (e.kind == 's') {
        std::size_t n = 0;
        is >> n;
        is.get();
        e.text.resize(n);
        is.read(e.text.data(), static_cast<std::streamsize>(n));
      } else if (e.kind == 'm') {
        is >> e.rows >> e.cols;
        read_tokens(is, static_cast<std::size_t>(e.rows * e.cols), e.tokens);
      } else if (e.kind == 'i' || e.kind == 'f') {
        std::size_t n = 0;
        is >> n;
        read_tokens(is, n, e.tokens);
      } else {
        throw IoError("unknown entry kind for key '" + key + "'");
      }
      if (!is) throw IoError("truncated blob at key '" + key + "'");
      r.entries_[key] = std::move(e);
    }
    return r;
  }
  static BlobReader load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return parse(os.str());
  }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  std::int64_t get_int(const std::string& key) const {
    auto v = get_ints(key);
    if (v.size() != 1) throw IoError("key '" + key + "' is not a scalar");
    return v[0];
  }
  std::vector<std::int64_t> get_ints(const std::string& key) const {
    const Entry& e = find(key, 'i');
    std::vector<std::int64_t> out;
    out.reserve(e.tokens.size());
    for (const auto& t : e.tokens) out.push_back(std::stoll(t));
    return out;
  }
  double get_real(const std::string& key) const {
    auto v = get_reals(key);
    if (v.size() != 1) throw IoError("key '" + key + "' is not a scalar");
    return v[0];
  }
  std::vector<double> get_reals(const std::string& key) const {
    const Entry& e = find(key, 'f');
    std::vector<double> out;
    out.reserve(e.tokens.size());
    for (const auto& t : e.tokens) out.push_back(detail::parse_hex_real(t));
    return out;
  }
  Eigen::VectorXd get_vector(const std::string& key) const {
    auto v = get_reals(key);
    return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  Eigen::MatrixXd get_matrix(const std::string& key) const {
    const Entry& e = find(key, 'm');
    Eigen::MatrixXd m(e.rows, e.cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = detail::parse_hex_real(e.tokens[static_cast<std::size_t>(i)]);
    }
    return m;
  }
  std::string get_string(const std::string& key) const { return find(key, 's').text; }

 private:
  struct Entry {
    char kind = 0;
    Eigen::Index rows = 0, cols = 0;
    std::vector<std::string> tokens;
    std::string text;
  };

  static void read_tokens(std::istream& is, std::size_t n, std::vector<std::string>& out) {
    out.resize(n);
    for (auto& t : out) is >> t;
  }

  const Entry& find(const std::string& key, char kind) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw IoError("missing key '" + key + "' in blob");
    if (it->second.kind != kind) throw IoError("key '" + key + "' has unexpected kind");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

}  // namespace ctrlflow
