#include "stmoe/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "stmoe/ops.hpp"

namespace stmoe {

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFU));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint32_t narrow_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFULL) throw std::length_error(std::string("write_dataset: ") + what + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

DatasetHeader parse_header(const std::string& bytes, const std::string& path) {
  if (bytes.size() < kDatasetHeaderBytes) {
    throw std::runtime_error("dataset '" + path + "' is truncated: expected at least " +
                             std::to_string(kDatasetHeaderBytes) + " header bytes, found " +
                             std::to_string(bytes.size()));
  }
  if (bytes.compare(0, 4, "MMP1") != 0) throw std::runtime_error("dataset '" + path + "' has bad magic (expected MMP1)");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  DatasetHeader h;
  h.version = get_u32(p + 4);
  if (h.version != kDatasetVersion) {
    throw std::runtime_error("dataset '" + path + "' has unsupported version " + std::to_string(h.version));
  }
  h.sequences = get_u32(p + 8);
  h.persons = get_u32(p + 12);
  h.frames = get_u32(p + 16);
  h.joints = get_u32(p + 20);
  h.fps = std::bit_cast<float>(get_u32(p + 24));
  return h;
}

}  // namespace

void write_dataset(const std::vector<MotionSequence>& sequences, const std::string& path) {
  DatasetHeader h;
  if (!sequences.empty()) {
    const auto& first = sequences.front();
    h.persons = narrow_u32(first.persons, "persons");
    h.frames = narrow_u32(first.frames, "frames");
    h.joints = narrow_u32(first.joints, "joints");
    h.fps = first.fps;
  }
  h.sequences = narrow_u32(sequences.size(), "sequence count");
  const std::size_t per_seq = std::size_t{h.persons} * h.frames * h.joints * 3;
  std::string buf;
  buf.reserve(kDatasetHeaderBytes + 4 * per_seq * sequences.size());
  buf.append("MMP1");
  put_u32(buf, kDatasetVersion);
  put_u32(buf, h.sequences);
  put_u32(buf, h.persons);
  put_u32(buf, h.frames);
  put_u32(buf, h.joints);
  put_u32(buf, std::bit_cast<std::uint32_t>(h.fps));
  put_u32(buf, 0);
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const auto& seq = sequences[s];
    if (seq.persons != h.persons || seq.frames != h.frames || seq.joints != h.joints ||
        std::bit_cast<std::uint32_t>(seq.fps) != std::bit_cast<std::uint32_t>(h.fps)) {
      throw std::invalid_argument("write_dataset: sequence " + std::to_string(s) + " differs in shape or fps");
    }
    if (seq.positions.size() != per_seq) {
      throw std::invalid_argument("write_dataset: sequence " + std::to_string(s) + " holds " +
                                  std::to_string(seq.positions.size()) + " values, expected " + std::to_string(per_seq));
    }
    for (std::size_t i = 0; i < per_seq; ++i) {
      if (!std::isfinite(seq.positions[i])) {
        throw std::invalid_argument("write_dataset: non-finite value in sequence " + std::to_string(s) +
                                    " at flat index " + std::to_string(i));
      }
      put_u32(buf, std::bit_cast<std::uint32_t>(seq.positions[i]));
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dataset '" + path + "'");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("short write to dataset '" + path + "'");
}

DatasetHeader read_dataset_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset '" + path + "'");
  std::string bytes(kDatasetHeaderBytes, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  bytes.resize(static_cast<std::size_t>(in.gcount()));
  return parse_header(bytes, path);
}

std::vector<MotionSequence> read_dataset(const std::string& path) {
  const std::string bytes = read_file(path);
  const DatasetHeader h = parse_header(bytes, path);
  const std::size_t per_seq = std::size_t{h.persons} * h.frames * h.joints * 3;
  const std::size_t expected = kDatasetHeaderBytes + 4 * per_seq * h.sequences;
  if (bytes.size() != expected) {
    throw std::runtime_error("dataset '" + path + "' has " + std::to_string(bytes.size()) + " bytes, expected " +
                             std::to_string(expected));
  }
  std::vector<MotionSequence> out(h.sequences);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + kDatasetHeaderBytes;
  for (std::size_t s = 0; s < h.sequences; ++s) {
    auto& seq = out[s];
    seq.persons = h.persons;
    seq.frames = h.frames;
    seq.joints = h.joints;
    seq.fps = h.fps;
    seq.positions.resize(per_seq);
    for (std::size_t i = 0; i < per_seq; ++i, p += 4) {
      const float v = std::bit_cast<float>(get_u32(p));
      if (!std::isfinite(v)) {
        throw std::runtime_error("dataset '" + path + "': non-finite value in sequence " + std::to_string(s) +
                                 " at flat index " + std::to_string(i));
      }
      seq.positions[i] = v;
    }
  }
  return out;
}

void SynthSpec::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("synth." + m); };
  if (persons == 0) fail("persons: must be positive");
  if (frames < 2) fail("frames: need at least 2");
  if (joints == 0) fail("joints: must be positive");
  if (!(fps > 0)) fail("fps: must be positive");
  if (walk < 0 || turn < 0 || stop_and_go < 0 || walk + turn + stop_and_go <= 0) {
    fail("walk/turn/stop_and_go: mix weights must be non-negative with a positive sum");
  }
  if (!(reach > 0)) fail("reach: must be positive");
  if (!(min_speed >= 0 && max_speed >= min_speed)) fail("min_speed/max_speed: need 0 <= min_speed <= max_speed");
  if (lane_margin < 0) fail("lane_margin: must be non-negative");
}

SynthSpec synth_spec_from_json(const Json& j) {
  SynthSpec s;
  ObjectReader r(j, "synth");
  r.read("sequences", s.sequences);
  r.read("persons", s.persons);
  r.read("frames", s.frames);
  r.read("joints", s.joints);
  r.read("fps", s.fps);
  r.read("seed", s.seed);
  r.read("walk", s.walk);
  r.read("turn", s.turn);
  r.read("stop_and_go", s.stop_and_go);
  r.read("reach", s.reach);
  r.read("min_speed", s.min_speed);
  r.read("max_speed", s.max_speed);
  r.read("lane_margin", s.lane_margin);
  r.finish();
  s.validate();
  return s;
}

Json to_json(const SynthSpec& s) {
  return Json{{"sequences", s.sequences}, {"persons", s.persons},     {"frames", s.frames},
              {"joints", s.joints},       {"fps", s.fps},             {"seed", s.seed},
              {"walk", s.walk},           {"turn", s.turn},           {"stop_and_go", s.stop_and_go},
              {"reach", s.reach},         {"min_speed", s.min_speed}, {"max_speed", s.max_speed},
              {"lane_margin", s.lane_margin}};
}

namespace {

constexpr double kRootHeight = 900.0;

struct Limb {
  std::array<double, 3> base{};
  std::array<double, 3> amp{};
  std::array<double, 3> phase{};
  double freq = 1.0;
};

struct PersonPlan {
  SynthLabel label;
  std::vector<std::array<double, 2>> root;  // ground-plane root track before lane placement
  std::vector<Limb> limbs;
  double lane_offset = 0.0;
};

MotionKind pick_kind(const SynthSpec& s, Rng& rng) {
  const double u = rng.uniform() * (s.walk + s.turn + s.stop_and_go);
  if (u < s.walk) return MotionKind::kWalk;
  if (u < s.walk + s.turn) return MotionKind::kTurn;
  return MotionKind::kStopAndGo;
}

}  // namespace

std::vector<MotionSequence> synth_generate(const SynthSpec& spec, std::vector<SynthLabel>* labels) {
  spec.validate();
  Rng rng(spec.seed);
  const double dt = 1.0 / spec.fps;
  const double pi = std::numbers::pi;
  std::vector<MotionSequence> out;
  if (labels) labels->clear();
  for (std::size_t s = 0; s < spec.sequences; ++s) {
    MotionSequence seq;
    seq.persons = spec.persons;
    seq.frames = spec.frames;
    seq.joints = spec.joints;
    seq.fps = static_cast<float>(spec.fps);
    seq.positions.resize(spec.persons * spec.frames * spec.joints * 3);
    double lane_cursor = 0.0;
    std::vector<PersonPlan> plans(spec.persons);
    for (std::size_t p = 0; p < spec.persons; ++p) {
      PersonPlan& plan = plans[p];
      SynthLabel& label = plan.label;
      label.kind = pick_kind(spec, rng);
      const double speed = rng.uniform(spec.min_speed, spec.max_speed);
      const double x0 = rng.uniform(-1000.0, 1000.0);
      auto& root = plan.root;
      root.resize(spec.frames);
      switch (label.kind) {
        case MotionKind::kWalk: {
          const double heading = (rng.uniform() < 0.5 ? 0.0 : pi) + rng.uniform(-pi / 8, pi / 8);
          for (std::size_t f = 0; f < spec.frames; ++f) {
            const double d = speed * dt * static_cast<double>(f);
            root[f] = {x0 + d * std::cos(heading), d * std::sin(heading)};
          }
          break;
        }
        case MotionKind::kTurn: {
          const double heading = (rng.uniform() < 0.5 ? 0.0 : pi) + rng.uniform(-pi / 8, pi / 8);
          const double rate = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.3, 1.0);
          const double radius = speed / rate;
          for (std::size_t f = 0; f < spec.frames; ++f) {
            const double a = heading + rate * dt * static_cast<double>(f);
            root[f] = {x0 + radius * (std::sin(a) - std::sin(heading)), -radius * (std::cos(a) - std::cos(heading))};
          }
          break;
        }
        case MotionKind::kStopAndGo: {
          const std::size_t lo = spec.frames / 4;
          const std::size_t hi = std::max(lo + 1, (3 * spec.frames) / 4);
          label.stop_frame = lo + rng.index(hi - lo);
          for (std::size_t f = 0; f < spec.frames; ++f) {
            const double d = speed * dt * static_cast<double>(std::min(f, label.stop_frame));
            root[f] = {x0 - d, 0.0};
          }
          break;
        }
      }
      // Stack lanes along y so that reach envelopes never intersect.
      double ymin = root[0][1], ymax = root[0][1];
      for (const auto& r : root) {
        ymin = std::min(ymin, r[1]);
        ymax = std::max(ymax, r[1]);
      }
      plan.lane_offset = lane_cursor + spec.reach - ymin;
      lane_cursor = plan.lane_offset + ymax + spec.reach + spec.lane_margin;

      // Base offset up to 0.6 reach plus oscillation up to 0.4 reach keeps
      // every joint inside the envelope.
      auto& limbs = plan.limbs;
      limbs.resize(spec.joints);
      for (std::size_t j = 1; j < spec.joints; ++j) {
        auto& limb = limbs[j];
        std::array<double, 3> dir{rng.normal(), rng.normal(), rng.normal()};
        const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-12;
        const double radius = rng.uniform(0.2, 0.6) * spec.reach;
        for (std::size_t c = 0; c < 3; ++c) {
          limb.base[c] = radius * dir[c] / norm;
          limb.amp[c] = rng.uniform(0.0, 0.4 * spec.reach / std::sqrt(3.0));
          limb.phase[c] = rng.uniform(0.0, 2 * pi);
        }
        limb.freq = rng.uniform(0.5, 2.0);
      }
    }
    // Center the lane stack on y = 0.
    const double center = 0.5 * (lane_cursor - spec.lane_margin);
    for (std::size_t p = 0; p < spec.persons; ++p) {
      const auto& [label, root, limbs, lane_offset] = plans[p];
      for (std::size_t f = 0; f < spec.frames; ++f) {
        const double time = dt * static_cast<double>(f);
        double damp = 1.0;
        if (label.kind == MotionKind::kStopAndGo && f > label.stop_frame) {
          damp = std::exp(-static_cast<double>(f - label.stop_frame) / (0.2 * spec.fps));
        }
        const std::array<double, 3> r{root[f][0], root[f][1] + lane_offset - center, kRootHeight};
        for (std::size_t j = 0; j < spec.joints; ++j) {
          for (std::size_t c = 0; c < 3; ++c) {
            double v = r[c];
            if (j > 0) {
              const auto& limb = limbs[j];
              v += limb.base[c] + damp * limb.amp[c] * std::sin(2 * pi * limb.freq * time + limb.phase[c]);
            }
            seq.positions[((p * spec.frames + f) * spec.joints + j) * 3 + c] = static_cast<float>(v);
          }
        }
      }
      if (labels) labels->push_back(label);
    }
    out.push_back(std::move(seq));
  }
  return out;
}

BatchIterator::BatchIterator(const std::vector<MotionSequence>& sequences, std::size_t batch_size, std::size_t t,
                             std::size_t total, std::optional<std::uint64_t> shuffle_seed)
    : seqs_(sequences), batch_size_(batch_size), t_(t), total_(total) {
  if (batch_size < 1) throw std::invalid_argument("batch_iter: batch_size must be at least 1");
  if (t == 0 || t > total) throw std::invalid_argument("batch_iter: need 0 < t <= T");
  for (std::size_t s = 0; s < seqs_.size(); ++s) {
    const auto& q = seqs_[s];
    if (q.frames < total) {
      throw std::invalid_argument("batch_iter: sequence " + std::to_string(s) + " has " + std::to_string(q.frames) +
                                  " frames, need " + std::to_string(total));
    }
    if (q.persons != seqs_[0].persons || q.joints != seqs_[0].joints) {
      throw std::invalid_argument("batch_iter: sequence " + std::to_string(s) + " differs in persons or joints");
    }
  }
  order_.resize(seqs_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.index(i)]);
  }
}

std::size_t BatchIterator::batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

std::optional<Batch> BatchIterator::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  const std::size_t m = seqs_[0].persons;
  const std::size_t j = seqs_[0].joints;
  const std::size_t d = j * 3;
  const std::size_t rows = (end - cursor_) * m;
  std::vector<double> target(rows * d * total_);
  std::vector<double> history(rows * d * t_);
  Batch b;
  b.persons = m;
  std::size_t row = 0;
  for (std::size_t i = cursor_; i < end; ++i) {
    const auto& q = seqs_[order_[i]];
    b.sequence_ids.push_back(order_[i]);
    for (std::size_t p = 0; p < m; ++p, ++row) {
      for (std::size_t f = 0; f < total_; ++f) {
        for (std::size_t jj = 0; jj < j; ++jj) {
          for (std::size_t c = 0; c < 3; ++c) {
            const double v = q.at(p, f, jj, c);
            const std::size_t axis = jj * 3 + c;
            target[(row * d + axis) * total_ + f] = v;
            if (f < t_) history[(row * d + axis) * t_ + f] = v;
          }
        }
      }
    }
  }
  cursor_ = end;
  b.history = Tensor({rows, d, t_}, std::move(history));
  b.target = Tensor({rows, d, total_}, std::move(target));
  return b;
}

Tensor unflatten_batch(const Tensor& x, std::size_t persons) {
  if (x.rank() != 3 || persons == 0 || x.dim(0) % persons != 0 || x.dim(1) % 3 != 0) {
    throw ShapeError("unflatten_batch: cannot split " + shape_str(x.shape()) + " with " + std::to_string(persons) +
                     " persons");
  }
  return Tensor({x.dim(0) / persons, persons, x.dim(1) / 3, 3, x.dim(2)},
                std::vector<double>(x.data().begin(), x.data().end()));
}

Tensor to_joint_layout(const Tensor& x) {
  if (x.rank() != 3 || x.dim(1) % 3 != 0) throw ShapeError("to_joint_layout: pose axis of " + shape_str(x.shape()) + " is not a multiple of 3");
  return ops::reshape(x, {x.dim(0), x.dim(1) / 3, 3, x.dim(2)});
}

}  // namespace stmoe
