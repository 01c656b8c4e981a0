#pragma once

// Model checkpoint container.
//
//   lplp-checkpoint 1
//   method <ce|pl|ppl|two_stage|ours>
//   classes <C> <d>
//   epoch <epochs run>
//   best_val_loss <real>
//   aggregation <mean|max|lse> <r>   or   aggregation none
//   threshold <real>
//   net <role> <n_widths> <w_0> ... <w_n-1>
//   params <role> <count> <v_1> ... <v_count>
//   ...                                  (one net/params pair per present role)
//   end
//
// Roles: extractor, score_head, class_head, class_extractor. Reals use 17
// significant digits, so a save/load cycle reproduces every parameter bit.

#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include "lplp/dataset_io.hpp"
#include "lplp/mil.hpp"
#include "lplp/nets.hpp"
#include "lplp/trainer.hpp"

namespace lplp {

struct Checkpoint {
  Method method = Method::ours;
  ModelTriple model;
  std::size_t epoch = 0;
  double best_val_loss = 0.0;
  std::optional<Aggregation> aggregation;
  double threshold = 0.5;

  static Checkpoint from_state(const TrainState& s, double threshold) {
    return {s.method, s.model, s.epoch, s.best_val_loss, s.aggregation, threshold};
  }

  bool operator==(const Checkpoint&) const = default;
};

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  out << "lplp-checkpoint 1\n";
  out << "method " << method_name(ck.method) << '\n';
  out << "classes " << ck.model.num_classes << ' ' << ck.model.feature_dim << '\n';
  out << "epoch " << ck.epoch << '\n';
  out << "best_val_loss " << io::format_real(ck.best_val_loss) << '\n';
  if (ck.aggregation)
    out << "aggregation " << ck.aggregation->name() << ' ' << io::format_real(ck.aggregation->sharpness) << '\n';
  else
    out << "aggregation none\n";
  out << "threshold " << io::format_real(ck.threshold) << '\n';
  auto net = [&](const char* role, const Mlp& m) {
    out << "net " << role << ' ' << m.spec.widths.size();
    for (std::size_t w : m.spec.widths) out << ' ' << w;
    out << "\nparams " << role << ' ' << m.params.size();
    for (double v : m.params) out << ' ' << io::format_real(v);
    out << '\n';
  };
  net("extractor", ck.model.extractor);
  if (ck.model.score_head) net("score_head", *ck.model.score_head);
  net("class_head", ck.model.class_head);
  if (ck.model.class_extractor) net("class_extractor", *ck.model.class_extractor);
  out << "end\n";
}

inline Checkpoint read_checkpoint(std::istream& in) {
  io::RecordReader reader(in);
  Checkpoint ck;
  auto keyed = [&](const char* key) {
    io::Record r = reader.next(key);
    if (r.word(0) != key) r.fail(std::string("expected '") + key + "' record");
    return r;
  };
  {
    const io::Record r = reader.next("format tag");
    r.expect_size(2);
    if (r.word(0) != "lplp-checkpoint") r.fail("not an lplp checkpoint");
    if (r.integer<int>(1) != 1) r.fail("unsupported checkpoint version");
  }
  {
    const io::Record r = keyed("method");
    r.expect_size(2);
    try {
      ck.method = parse_method(std::string(r.word(1)));
    } catch (const ConfigError& e) {
      r.fail(e.what());
    }
  }
  {
    const io::Record r = keyed("classes");
    r.expect_size(3);
    ck.model.num_classes = r.integer<int>(1);
    ck.model.feature_dim = r.integer<std::size_t>(2);
  }
  {
    const io::Record r = keyed("epoch");
    r.expect_size(2);
    ck.epoch = r.integer<std::size_t>(1);
  }
  {
    const io::Record r = keyed("best_val_loss");
    r.expect_size(2);
    ck.best_val_loss = r.real(1);
  }
  {
    const io::Record r = keyed("aggregation");
    if (r.size() == 2 && r.word(1) == "none") {
      ck.aggregation.reset();
    } else {
      r.expect_size(3);
      try {
        ck.aggregation = Aggregation::parse(std::string(r.word(1)), r.real(2));
      } catch (const ConfigError& e) {
        r.fail(e.what());
      }
    }
  }
  {
    const io::Record r = keyed("threshold");
    r.expect_size(2);
    ck.threshold = r.real(1);
  }
  bool have_extractor = false, have_class_head = false;
  for (;;) {
    const io::Record r = reader.next("net record or end marker");
    if (r.word(0) == "end") {
      r.expect_size(1);
      break;
    }
    if (r.word(0) != "net") r.fail("expected 'net' record");
    const std::string role(r.word(1));
    Mlp m;
    const auto n = r.integer<std::size_t>(2);
    r.expect_size(3 + n);
    for (std::size_t k = 0; k < n; ++k) m.spec.widths.push_back(r.integer<std::size_t>(3 + k));
    try {
      m.spec.validate();
    } catch (const ConfigError& e) {
      r.fail(e.what());
    }
    const io::Record p = reader.next("params of " + role);
    if (p.word(0) != "params" || p.word(1) != role) p.fail("expected 'params " + role + "' record");
    const auto count = p.integer<std::size_t>(2);
    if (count != m.spec.parameter_count()) p.fail("parameter count does not match the net shape");
    p.expect_size(3 + count);
    m.params.resize(count);
    for (std::size_t k = 0; k < count; ++k) m.params[k] = p.real(3 + k);

    if (role == "extractor") {
      ck.model.extractor = std::move(m);
      have_extractor = true;
    } else if (role == "score_head") {
      ck.model.score_head = std::move(m);
    } else if (role == "class_head") {
      ck.model.class_head = std::move(m);
      have_class_head = true;
    } else if (role == "class_extractor") {
      ck.model.class_extractor = std::move(m);
    } else {
      r.fail("unknown net role '" + role + "'");
    }
  }
  if (!have_extractor || !have_class_head) throw ParseError("checkpoint lacks extractor or class head", reader.line());
  try {
    ck.model.validate();
  } catch (const ConfigError& e) {
    throw ValidationError(std::string("checkpoint: ") + e.what());
  }
  return ck;
}

inline std::string checkpoint_to_string(const Checkpoint& ck) {
  std::ostringstream os;
  write_checkpoint(os, ck);
  return os.str();
}

inline Checkpoint checkpoint_from_string(const std::string& text) {
  std::istringstream in(text);
  return read_checkpoint(in);
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_atomically(path, [&](std::ostream& out) { write_checkpoint(out, ck); });
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

/// One self-describing line per epoch.
inline std::string format_epoch_record(const EpochRecord& r) {
  std::ostringstream os;
  os << "epoch=" << r.epoch << " stage=" << r.stage << " train_loss=" << io::format_real(r.train_loss)
     << " val_loss=" << io::format_real(r.val_loss) << " timestamp=" << r.timestamp
     << " epochs_since_improvement=" << r.epochs_since_improvement;
  return os.str();
}

}  // namespace lplp
