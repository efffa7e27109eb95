#include "trajeglish/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "trajeglish/error.hpp"

namespace trajeglish {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'T', 'G', 'C', 'K'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : buf_(std::move(bytes)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void get_doubles(double* dst, std::size_t n) {
    need(n * sizeof(double));
    std::memcpy(dst, buf_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  bool done() const { return pos_ == buf_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) {
      throw DataError("checkpoint truncated at byte offset " + std::to_string(pos_));
    }
  }
  std::string buf_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put_string(out, model.config().to_json().dump());
  put_string(out, meta.dump());
  const auto& store = model.params();
  put<std::uint64_t>(out, store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    put_string(out, p.name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.cols()));
    put<std::uint8_t>(out, p.decay ? 1 : 0);
    out.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str());
  char magic[4];
  for (char& c : magic) c = r.get<char>();
  if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("not a checkpoint file (bad magic at byte offset 0)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig cfg;
  nlohmann::json meta;
  try {
    cfg = ModelConfig::from_json(nlohmann::json::parse(r.get_string()));
    meta = nlohmann::json::parse(r.get_string());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const auto n = r.get<std::uint64_t>();
  nn::ParamStore store;
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string name = r.get_string();
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    const bool decay = r.get<std::uint8_t>() != 0;
    const int id = store.add_constant(name, static_cast<int>(rows), static_cast<int>(cols), 0.0);
    store[static_cast<std::size_t>(id)].decay = decay;
    r.get_doubles(store[static_cast<std::size_t>(id)].value.data(), static_cast<std::size_t>(rows) * cols);
  }
  if (!r.done()) throw DataError("trailing bytes in checkpoint at offset " + std::to_string(r.pos()));
  return {Model(cfg, std::move(store)), std::move(meta)};
}

}  // namespace trajeglish
