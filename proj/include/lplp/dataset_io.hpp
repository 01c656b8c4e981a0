#pragma once

// Text container for DatasetSplit.
//
//   lplp-dataset 1
//   header <C> <d> <seed> <n_train_bags> <n_validation_bags> <n_test_bags>
//   bag <split> <bag_id> <Y> <n_instances> <p_1> ... <p_C>     (positive bag)
//   bag <split> <bag_id> <Y> <n_instances> none                (negative bag)
//   inst <split> <bag_id> <instance_id> <true_label> <x_1> ... <x_d>
//   ...
//   end
//
// Each bag record is followed by exactly n_instances inst records. Splits
// appear in the order train, validation, test. Reals are written with 17
// significant digits, so a save/load cycle is bit-exact.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "lplp/bagdata.hpp"
#include "lplp/error.hpp"

namespace lplp {

namespace io {

inline constexpr std::string_view kDatasetMagic = "lplp-dataset";
inline constexpr int kDatasetVersion = 1;

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Whitespace tokenizer over a single record that reports failures with the line number.
class Record {
 public:
  Record(std::string_view text, std::size_t line) : line_(line) {
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\r')) ++i;
      const std::size_t start = i;
      while (i < text.size() && text[i] != ' ' && text[i] != '\t' && text[i] != '\r') ++i;
      if (i > start) tokens_.emplace_back(text.substr(start, i - start));
    }
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  std::size_t line() const noexcept { return line_; }
  bool empty() const noexcept { return tokens_.empty(); }

  std::string_view word(std::size_t i) const {
    if (i >= tokens_.size()) fail("missing field " + std::to_string(i));
    return tokens_[i];
  }

  template <class Int>
  Int integer(std::size_t i) const {
    const std::string_view t = word(i);
    Int out{};
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc{} || ptr != t.data() + t.size()) fail("expected an integer, got '" + std::string(t) + "'");
    return out;
  }

  double real(std::size_t i) const {
    const std::string_view t = word(i);
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc{} || ptr != t.data() + t.size()) fail("expected a real number, got '" + std::string(t) + "'");
    return out;
  }

  void expect_size(std::size_t n) const {
    if (tokens_.size() != n)
      fail("expected " + std::to_string(n) + " fields, found " + std::to_string(tokens_.size()));
  }

  [[noreturn]] void fail(const std::string& what) const { throw ParseError(what, line_); }

 private:
  std::vector<std::string_view> tokens_;
  std::size_t line_;
};

/// Sequential record reader that skips blank lines.
class RecordReader {
 public:
  explicit RecordReader(std::istream& in) : in_(in) {}

  /// Next non-blank record; fails with `context` at end of input.
  Record next(const std::string& context) {
    while (std::getline(in_, buffer_)) {
      ++line_;
      Record r(buffer_, line_);
      if (!r.empty()) return r;
    }
    throw ParseError("unexpected end of input while reading " + context, line_ + 1);
  }

  std::size_t line() const noexcept { return line_; }

 private:
  std::istream& in_;
  std::string buffer_;
  std::size_t line_ = 0;
};

/// Writes through a temporary sibling file and renames it into place.
template <class Writer>
void write_atomically(const std::filesystem::path& path, Writer&& write) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    write(out);
    out.flush();
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace io

inline void write_dataset(std::ostream& out, const DatasetSplit& data) {
  out << io::kDatasetMagic << ' ' << io::kDatasetVersion << '\n';
  out << "header " << data.num_positive_classes << ' ' << data.feature_dim << ' ' << data.seed << ' '
      << data.train.size() << ' ' << data.validation.size() << ' ' << data.test.size() << '\n';
  for (SplitTag tag : {SplitTag::train, SplitTag::validation, SplitTag::test}) {
    const char* split = split_name(tag);
    for (const Bag& bag : data.bags(tag)) {
      out << "bag " << split << ' ' << bag.id << ' ' << bag.bag_label << ' ' << bag.instances.size();
      if (bag.partial_proportions) {
        for (double v : *bag.partial_proportions) out << ' ' << io::format_real(v);
      } else {
        out << " none";
      }
      out << '\n';
      for (const Instance& x : bag.instances) {
        out << "inst " << split << ' ' << bag.id << ' ' << x.id << ' ' << x.true_label;
        for (double v : x.features) out << ' ' << io::format_real(v);
        out << '\n';
      }
    }
  }
  out << "end\n";
}

inline std::string dataset_to_string(const DatasetSplit& data) {
  std::ostringstream os;
  write_dataset(os, data);
  return os.str();
}

/// Parses a whole dataset. Either returns a validated split or throws; nothing partial escapes.
inline DatasetSplit read_dataset(std::istream& in) {
  io::RecordReader reader(in);
  {
    const io::Record magic = reader.next("format tag");
    magic.expect_size(2);
    if (magic.word(0) != io::kDatasetMagic) magic.fail("not an lplp dataset file");
    if (magic.integer<int>(1) != io::kDatasetVersion) magic.fail("unsupported dataset version");
  }
  DatasetSplit data;
  std::size_t counts[3] = {};
  {
    const io::Record h = reader.next("header");
    h.expect_size(7);
    if (h.word(0) != "header") h.fail("expected header record");
    data.num_positive_classes = h.integer<int>(1);
    data.feature_dim = h.integer<std::size_t>(2);
    data.seed = h.integer<std::uint64_t>(3);
    for (int k = 0; k < 3; ++k) counts[k] = h.integer<std::size_t>(static_cast<std::size_t>(4 + k));
    if (data.num_positive_classes < 1) h.fail("C must be positive");
    if (data.feature_dim < 1) h.fail("feature dimension must be positive");
  }
  const std::size_t num_classes = static_cast<std::size_t>(data.num_positive_classes);

  for (SplitTag tag : {SplitTag::train, SplitTag::validation, SplitTag::test}) {
    const std::string_view split = split_name(tag);
    auto& bags = data.bags(tag);
    const std::size_t expected = counts[static_cast<int>(tag)];
    bags.reserve(expected);
    for (std::size_t b = 0; b < expected; ++b) {
      const io::Record r = reader.next(std::string(split) + " bag " + std::to_string(b));
      if (r.word(0) != "bag") r.fail("expected a bag record");
      if (r.word(1) != split) r.fail("bag record in split '" + std::string(r.word(1)) + "', expected '" +
                                     std::string(split) + "'");
      Bag bag;
      bag.id = r.integer<std::uint64_t>(2);
      bag.bag_label = r.integer<int>(3);
      const auto n = r.integer<std::size_t>(4);
      if (r.size() == 6 && r.word(5) == "none") {
        bag.partial_proportions.reset();
      } else {
        r.expect_size(5 + num_classes);
        std::vector<double> p(num_classes);
        for (std::size_t c = 0; c < num_classes; ++c) p[c] = r.real(5 + c);
        bag.partial_proportions = std::move(p);
      }
      bag.instances.reserve(n);
      for (std::size_t k = 0; k < n; ++k) {
        const io::Record x = reader.next("instance " + std::to_string(k) + " of bag " + std::to_string(bag.id));
        x.expect_size(5 + data.feature_dim);
        if (x.word(0) != "inst") x.fail("expected an inst record");
        if (x.word(1) != split) x.fail("instance split tag does not match its bag");
        if (x.integer<std::uint64_t>(2) != bag.id) x.fail("instance bag id does not match its bag");
        Instance inst;
        inst.id = x.integer<std::uint64_t>(3);
        inst.true_label = x.integer<int>(4);
        inst.features.resize(data.feature_dim);
        for (std::size_t j = 0; j < data.feature_dim; ++j) inst.features[j] = x.real(5 + j);
        bag.instances.push_back(std::move(inst));
      }
      bags.push_back(std::move(bag));
    }
  }
  const io::Record tail = reader.next("end marker");
  if (tail.size() != 1 || tail.word(0) != "end") tail.fail("expected end marker");
  validate_dataset(data);
  return data;
}

inline DatasetSplit dataset_from_string(const std::string& text) {
  std::istringstream in(text);
  return read_dataset(in);
}

inline void save_dataset(const DatasetSplit& data, const std::filesystem::path& path) {
  io::write_atomically(path, [&](std::ostream& out) { write_dataset(out, data); });
}

inline DatasetSplit load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset " + path.string());
  return read_dataset(in);
}

}  // namespace lplp
