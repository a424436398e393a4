#include "flowcast/checkpoint.hpp"

#include "json.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace flowcast::ckpt {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'F', 'C', 'C', 'K'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  b[0] = static_cast<char>(v & 0xff);
  b[1] = static_cast<char>((v >> 8) & 0xff);
  b[2] = static_cast<char>((v >> 16) & 0xff);
  b[3] = static_cast<char>((v >> 24) & 0xff);
  out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in) {
  char b[4];
  in.read(b, 4);
  if (!in) throw std::runtime_error("checkpoint: truncated header");
  return static_cast<std::uint32_t>(static_cast<unsigned char>(b[0])) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[1])) << 8) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[2])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[3])) << 24);
}

static_assert(sizeof(double) == 8, "parameter payload assumes 8-byte doubles");

void put_doubles(std::ostream& out, const Eigen::VectorXd& v) {
  // Little-endian byte order; written bytewise so the file is portable.
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    std::uint64_t bits;
    const double d = v[i];
    std::memcpy(&bits, &d, 8);
    char b[8];
    for (int k = 0; k < 8; ++k) b[k] = static_cast<char>((bits >> (8 * k)) & 0xff);
    out.write(b, 8);
  }
}

Eigen::VectorXd get_doubles(std::istream& in, Eigen::Index n) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    char b[8];
    in.read(b, 8);
    if (!in) throw std::runtime_error("checkpoint: truncated parameter payload");
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[k])) << (8 * k);
    double d;
    std::memcpy(&d, &bits, 8);
    v[i] = d;
  }
  return v;
}

}  // namespace

const char* to_string(Stage stage) {
  switch (stage) {
    case Stage::kPretrained: return "pretrained";
    case Stage::kFinetuned: return "finetuned";
    case Stage::kStreamed: return "streamed";
  }
  throw std::invalid_argument("checkpoint: unknown stage");
}

Stage stage_from_string(const std::string& name) {
  if (name == "pretrained") return Stage::kPretrained;
  if (name == "finetuned") return Stage::kFinetuned;
  if (name == "streamed") return Stage::kStreamed;
  throw std::invalid_argument("checkpoint: unknown stage '" + name + "'");
}

void Checkpoint::validate() const {
  horizon.validate();
  if (feature_size < 1 || hidden < 1)
    throw std::invalid_argument("checkpoint: feature_size and hidden must be >= 1");
  if (forecaster_params.size() == 0)
    throw std::invalid_argument("checkpoint: no forecaster parameters");
  if (has_covariance_net() && cov_hidden.empty())
    throw std::invalid_argument("checkpoint: covariance net stored without hidden sizes");
  for (int h : cov_hidden)
    if (h < 1) throw std::invalid_argument("checkpoint: covariance hidden sizes must be >= 1");
}

void write_checkpoint(const Checkpoint& checkpoint, std::ostream& out) {
  checkpoint.validate();
  json header;
  header["stage"] = to_string(checkpoint.stage);
  header["horizon"] = {{"tau_h", checkpoint.horizon.tau_h},
                       {"tau_f", checkpoint.horizon.tau_f},
                       {"num_modes", checkpoint.horizon.num_modes}};
  header["feature_size"] = checkpoint.feature_size;
  header["hidden"] = checkpoint.hidden;
  header["forecaster_param_count"] = checkpoint.forecaster_params.size();
  header["cov_hidden"] = checkpoint.cov_hidden;
  header["cov_param_count"] = checkpoint.cov_params.size();
  const std::string head = header.dump();

  out.write(kMagic, 4);
  put_u32(out, kFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(head.size()));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  put_doubles(out, checkpoint.forecaster_params);
  put_doubles(out, checkpoint.cov_params);
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

void write_checkpoint_file(const Checkpoint& checkpoint, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  write_checkpoint(checkpoint, out);
  if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic, not a checkpoint file");
  const std::uint32_t version = get_u32(in);
  if (version != kFormatVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  const std::uint32_t head_len = get_u32(in);
  std::string head(head_len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head_len));
  if (!in) throw std::runtime_error("checkpoint: truncated header");

  json header;
  try {
    header = json::parse(head);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: malformed header: ") + e.what());
  }

  Checkpoint c;
  try {
    c.stage = stage_from_string(header.at("stage").get<std::string>());
    const json& h = header.at("horizon");
    c.horizon.tau_h = h.at("tau_h").get<int>();
    c.horizon.tau_f = h.at("tau_f").get<int>();
    c.horizon.num_modes = h.at("num_modes").get<int>();
    c.feature_size = header.at("feature_size").get<int>();
    c.hidden = header.at("hidden").get<int>();
    c.cov_hidden = header.at("cov_hidden").get<std::vector<int>>();
    const auto n_model = header.at("forecaster_param_count").get<Eigen::Index>();
    const auto n_cov = header.at("cov_param_count").get<Eigen::Index>();
    if (n_model < 0 || n_cov < 0) throw std::runtime_error("negative parameter count");
    c.forecaster_params = get_doubles(in, n_model);
    c.cov_params = get_doubles(in, n_cov);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: malformed header: ") + e.what());
  }
  // Exactly at end of payload.
  char extra;
  if (in.read(&extra, 1)) throw std::runtime_error("checkpoint: trailing bytes after payload");
  c.validate();
  return c;
}

Checkpoint read_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
  return read_checkpoint(in);
}

std::unique_ptr<forecast::LearnedForecaster> make_forecaster(const Checkpoint& checkpoint) {
  checkpoint.validate();
  auto model = std::make_unique<forecast::LearnedForecaster>(
      checkpoint.horizon, checkpoint.feature_size, checkpoint.hidden);
  if (model->arena().size() != checkpoint.forecaster_params.size())
    throw std::runtime_error(
        "checkpoint: forecaster parameter count does not match the architecture");
  model->arena().values() = checkpoint.forecaster_params;
  return model;
}

std::unique_ptr<df::CovarianceNet> make_covariance_net(const Checkpoint& checkpoint) {
  checkpoint.validate();
  if (!checkpoint.has_covariance_net())
    throw std::runtime_error("checkpoint: no covariance net stored (stage " +
                             std::string(to_string(checkpoint.stage)) + ")");
  auto net = std::make_unique<df::CovarianceNet>(checkpoint.feature_size, checkpoint.cov_hidden,
                                                 checkpoint.horizon.tau_f);
  if (net->arena().size() != checkpoint.cov_params.size())
    throw std::runtime_error(
        "checkpoint: covariance parameter count does not match the architecture");
  net->arena().values() = checkpoint.cov_params;
  return net;
}

Checkpoint snapshot(const forecast::LearnedForecaster& model, Stage stage) {
  Checkpoint c;
  c.stage = stage;
  c.horizon = model.horizon();
  c.feature_size = model.feature_size();
  c.hidden = model.hidden();
  c.forecaster_params = model.arena().values();
  return c;
}

Checkpoint snapshot(const forecast::LearnedForecaster& model, const df::CovarianceNet& net,
                    Stage stage) {
  Checkpoint c = snapshot(model, stage);
  c.cov_hidden = net.hidden();
  c.cov_params = net.arena().values();
  return c;
}

}  // namespace flowcast::ckpt
