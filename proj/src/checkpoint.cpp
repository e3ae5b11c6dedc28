#include "dacal/checkpoint.hpp"

#include <cstring>
#include <sstream>

#include "dacal/errors.hpp"
#include "dacal/io.hpp"

namespace dacal {

namespace {

constexpr char kMagic[8] = {'D', 'A', 'C', 'A', 'L', 'C', 'K', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

void put_block(std::vector<std::uint8_t>& out, const std::vector<std::span<const double>>& spans) {
  for (const auto& s : spans) {
    const auto bytes = encode_f64(s);
    out.insert(out.end(), bytes.begin(), bytes.end());
  }
}

std::size_t count(const std::vector<std::span<const double>>& spans) {
  std::size_t n = 0;
  for (const auto& s : spans) n += s.size();
  return n;
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T value;
    take(&value, sizeof(T));
    return value;
  }
  void take(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw IoError("checkpoint is truncated");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  void fill(const std::vector<std::span<double>>& spans) {
    for (const auto& s : spans) take(s.data(), s.size() * sizeof(double));
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& config, const TrainState& state,
                     double best_miou) {
  std::ostringstream rng_text;
  rng_text << state.rng;
  nlohmann::json velocity_sizes = nlohmann::json::array();
  for (const auto& v : state.optimizer.velocity()) velocity_sizes.push_back(v.size());
  const nlohmann::json header = {{"config", to_json(config)},
                                 {"config_hash", config_hash(config)},
                                 {"variant", to_string(config.variant)},
                                 {"iteration", state.iteration},
                                 {"total_iterations", state.total_iterations},
                                 {"rng", rng_text.str()},
                                 {"best_miou", format_double(best_miou)},
                                 {"student", count(state.student.state())},
                                 {"teacher", count(state.teacher.state())},
                                 {"mtn", state.mtn ? count(state.mtn->state()) : 0},
                                 {"mtn_ema", state.mtn_ema ? count(state.mtn_ema->state()) : 0},
                                 {"velocity", velocity_sizes}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + sizeof kMagic);
  put(out, kVersion);
  put(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  put_block(out, state.student.state());
  put_block(out, state.teacher.state());
  if (state.mtn) put_block(out, state.mtn->state());
  if (state.mtn_ema) put_block(out, state.mtn_ema->state());
  for (const auto& v : state.optimizer.velocity()) {
    const auto bytes = encode_f64(v);
    out.insert(out.end(), bytes.begin(), bytes.end());
  }
  write_file(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  Reader in(bytes);
  char magic[8];
  in.take(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw IoError(path.string() + " is not a checkpoint");
  if (in.get<std::uint32_t>() != kVersion) throw IoError("unsupported checkpoint version");
  std::string text(in.get<std::uint64_t>(), '\0');
  in.take(text.data(), text.size());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint header: " + std::string(e.what()));
  }
  ExperimentConfig config = config_from_json(header.at("config"));
  const bool has_mtn = header.at("mtn").get<std::size_t>() > 0;
  const bool calibrated = config.variant == Variant::PH || config.variant == Variant::BI;
  std::optional<MtnConfig> mtn;
  if (has_mtn || calibrated) mtn = config.mtn;
  TrainState state = make_train_state(config.model, mtn, config.self_training, config.iterations, config.seed);
  auto check = [&](const char* key, std::size_t expected) {
    if (header.at(key).get<std::size_t>() != expected) throw IoError(std::string("checkpoint block size mismatch: ") + key);
  };
  check("student", count(std::as_const(state.student).state()));
  check("teacher", count(std::as_const(state.teacher).state()));
  check("mtn", state.mtn ? count(std::as_const(*state.mtn).state()) : 0);
  check("mtn_ema", state.mtn_ema ? count(std::as_const(*state.mtn_ema).state()) : 0);
  in.fill(state.student.state());
  in.fill(state.teacher.state());
  if (state.mtn) in.fill(state.mtn->state());
  if (state.mtn_ema) in.fill(state.mtn_ema->state());
  auto& velocity = state.optimizer.velocity();
  velocity.clear();
  for (const auto& n : header.at("velocity")) {
    std::vector<double> v(n.get<std::size_t>());
    in.take(v.data(), v.size() * sizeof(double));
    velocity.push_back(std::move(v));
  }
  if (!in.done()) throw IoError("checkpoint has trailing bytes");
  state.iteration = header.at("iteration").get<long>();
  state.total_iterations = header.at("total_iterations").get<long>();
  std::istringstream rng_text(header.at("rng").get<std::string>());
  rng_text >> state.rng;
  if (!rng_text) throw IoError("checkpoint RNG state is unreadable");
  return {std::move(config), std::move(state), std::stod(header.at("best_miou").get<std::string>())};
}

}  // namespace dacal
