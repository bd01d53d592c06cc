#include "kdmt/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "kdmt/error.hpp"

namespace kdmt {
namespace {

constexpr char kMagic[8] = {'K', 'D', 'M', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <class T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i)
      out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n)
      throw FormatError("truncated checkpoint: " + std::string(what) +
                        " needs " + std::to_string(n) + " bytes at offset " +
                        std::to_string(pos_) + ", file has " +
                        std::to_string(in_.size()));
  }
  template <class T>
  T uint(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<T>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>("value")); }
  std::string string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::mlm: return "mlm";
    case Stage::base: return "base";
    case Stage::ckd: return "ckd";
  }
  return "?";
}

Stage parse_stage(const std::string& text) {
  if (text == "mlm") return Stage::mlm;
  if (text == "base") return Stage::base;
  if (text == "ckd") return Stage::ckd;
  throw FormatError("unknown checkpoint stage '" + text + "'");
}

Checkpoint Checkpoint::from_model(const Seq2SeqModel& model, Stage stage,
                                  std::uint64_t updates) {
  Checkpoint c;
  c.config = model.config();
  c.stage = stage;
  c.updates = updates;
  for (const auto& [name, entry] : model.parameters())
    c.params.emplace(name, entry.param.value);
  return c;
}

void Checkpoint::apply_to(Seq2SeqModel& model) const {
  if (!(model.config() == config))
    throw ConfigError("checkpoint config does not match the model config");
  if (params.size() != model.parameters().size())
    throw ConfigError("checkpoint holds " + std::to_string(params.size()) +
                      " parameters, model expects " +
                      std::to_string(model.parameters().size()));
  for (auto& [name, entry] : model.parameters()) {
    auto it = params.find(name);
    if (it == params.end())
      throw ConfigError("checkpoint lacks parameter " + name);
    if (it->second.shape() != entry.param.value.shape())
      throw ConfigError("parameter " + name + " has shape " +
                        to_string(it->second.shape()) + ", config implies " +
                        to_string(entry.param.value.shape()));
    entry.param.value = it->second;
    entry.param.zero_grad();
  }
}

Seq2SeqModel Checkpoint::to_model() const {
  Seq2SeqModel model(config, 0);
  apply_to(model);
  return model;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.uint<std::uint32_t>(kVersion);
  const std::string header = ckpt.config.to_text() +
                             "stage=" + to_string(ckpt.stage) + "\n" +
                             "updates=" + std::to_string(ckpt.updates) + "\n";
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(header.size()));
  w.bytes(header.data(), header.size());
  w.uint<std::uint64_t>(ckpt.params.size());
  for (const auto& [name, t] : ckpt.params) {
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.uint<std::uint64_t>(e);
    for (double v : t.data()) w.f64(v);
  }
  return w.take();
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.string(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic))
    throw FormatError("bad magic at offset 0 (not a checkpoint)");
  const std::size_t version_at = r.offset();
  const auto version = r.uint<std::uint32_t>("version");
  if (version != kVersion)
    throw FormatError("unsupported version " + std::to_string(version) +
                      " at offset " + std::to_string(version_at));
  const auto header_len = r.uint<std::uint32_t>("header length");
  const std::string header = r.string(header_len, "header");

  Checkpoint ckpt;
  std::string model_text;
  std::istringstream in(header);
  std::string line;
  bool have_stage = false, have_updates = false;
  while (std::getline(in, line)) {
    if (line.rfind("stage=", 0) == 0) {
      ckpt.stage = parse_stage(line.substr(6));
      have_stage = true;
    } else if (line.rfind("updates=", 0) == 0) {
      try {
        ckpt.updates = std::stoull(line.substr(8));
      } catch (const std::exception&) {
        throw FormatError("bad update counter in header");
      }
      have_updates = true;
    } else {
      model_text += line + "\n";
    }
  }
  if (!have_stage || !have_updates)
    throw FormatError("header lacks stage/updates");
  try {
    ckpt.config = ModelConfig::from_text(model_text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("header: ") + e.what());
  }

  const auto count = r.uint<std::uint64_t>("parameter count");
  for (std::uint64_t p = 0; p < count; ++p) {
    const auto name_len = r.uint<std::uint32_t>("name length");
    std::string name = r.string(name_len, "name");
    const std::size_t rank_at = r.offset();
    const auto rank = r.uint<std::uint32_t>("rank");
    if (rank == 0 || rank > 8)
      throw FormatError("implausible rank " + std::to_string(rank) +
                        " at offset " + std::to_string(rank_at));
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::size_t at = r.offset();
      const auto e = r.uint<std::uint64_t>("extent");
      if (e == 0 || e > (std::uint64_t{1} << 32))
        throw FormatError("bad extent at offset " + std::to_string(at));
      shape.push_back(e);
      n *= e;
    }
    r.need(n * 8, "parameter values");
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64();
    if (!ckpt.params.emplace(std::move(name), Tensor(shape, std::move(data))).second)
      throw FormatError("duplicate parameter before offset " +
                        std::to_string(r.offset()));
  }
  if (!r.done())
    throw FormatError("trailing bytes at offset " + std::to_string(r.offset()));
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const ModelConfig& expected) {
  Checkpoint c = load_checkpoint(path);
  if (!(c.config == expected)) {
    std::string detail;
    if (c.config.vocab_size != expected.vocab_size)
      detail = " (vocab_size " + std::to_string(c.config.vocab_size) +
               " vs expected " + std::to_string(expected.vocab_size) + ")";
    throw ConfigError("config mismatch in " + path.string() + detail);
  }
  return c;
}

Checkpoint average_checkpoints(std::span<const Checkpoint> checkpoints) {
  if (checkpoints.empty()) throw ContractError("no checkpoints to average");
  const Checkpoint* latest = &checkpoints[0];
  for (const auto& c : checkpoints) {
    if (c.updates >= latest->updates) latest = &c;
    if (c.params.size() != checkpoints[0].params.size())
      throw ContractError("checkpoints hold different parameter sets");
  }
  Checkpoint out;
  out.config = latest->config;
  out.stage = latest->stage;
  out.updates = latest->updates;
  const std::size_t k = checkpoints.size();
  std::vector<double> column(k);
  for (const auto& [name, first] : checkpoints[0].params) {
    std::vector<const Tensor*> tensors;
    for (const auto& c : checkpoints) {
      auto it = c.params.find(name);
      if (it == c.params.end())
        throw ContractError("checkpoint lacks parameter " + name);
      if (it->second.shape() != first.shape())
        throw ContractError("parameter " + name + " has shapes " +
                            to_string(first.shape()) + " and " +
                            to_string(it->second.shape()));
      tensors.push_back(&it->second);
    }
    Tensor avg(first.shape());
    for (std::size_t i = 0; i < avg.size(); ++i) {
      for (std::size_t j = 0; j < k; ++j) column[j] = (*tensors[j])[i];
      std::sort(column.begin(), column.end());
      // Running mean: exact for identical inputs.
      double m = column[0];
      for (std::size_t j = 1; j < k; ++j)
        m += (column[j] - m) / static_cast<double>(j + 1);
      avg[i] = m;
    }
    out.params.emplace(name, std::move(avg));
  }
  return out;
}

}  // namespace kdmt
