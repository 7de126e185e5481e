#include "crossformer/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "crossformer/error.hpp"

namespace crossformer {

namespace {

constexpr std::array<char, 8> kMagic = {'C', 'R', 'F', 'M', 'C', 'K', 'P', 'T'};
// Guards against absurd allocations from a corrupt length field.
constexpr std::uint64_t kMaxLength = std::uint64_t{1} << 34;

template <typename U>
void put_le(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) throw ParseError("checkpoint truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put_le<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const auto n = get_le<std::uint64_t>(in);
  if (n > kMaxLength) throw ParseError("checkpoint string length is corrupt");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw ParseError("checkpoint truncated");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  check_params(ckpt.params, ckpt.config);
  const nlohmann::json header = {{"model", ckpt.config}, {"metadata", ckpt.metadata}};
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + tmp.string() + "'");
    out.write(kMagic.data(), kMagic.size());
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_string(out, header.dump());
    put_le<std::uint64_t>(out, ckpt.params.slots().size());
    for (const auto& slot : ckpt.params.slots()) {
      put_string(out, slot.name);
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(slot.value.shape.size()));
      for (std::size_t d : slot.value.shape) put_le<std::uint64_t>(out, d);
      for (double v : slot.value.data) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    out.flush();
    if (!out) throw IoError("failed writing checkpoint '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into '" + path.string() + "': " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw ParseError("'" + path.string() + "' is not a checkpoint");
  }
  const auto version = get_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(get_string(in));
    ckpt.config = header.at("model").get<ModelConfig>();
    ckpt.metadata = header.value("metadata", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  const auto count = get_le<std::uint64_t>(in);
  if (count > kMaxLength) throw ParseError("checkpoint slot count is corrupt");
  std::vector<ParamSlot> slots;
  for (std::uint64_t i = 0; i < count; ++i) {
    ParamSlot slot;
    slot.name = get_string(in);
    const auto rank = get_le<std::uint32_t>(in);
    if (rank > 8) throw ParseError("checkpoint slot '" + slot.name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t size = 1;
    for (auto& d : shape) {
      d = get_le<std::uint64_t>(in);
      size *= d;
      if (size > kMaxLength) throw ParseError("checkpoint slot '" + slot.name + "' is too large");
    }
    slot.value = Array(shape);
    for (double& v : slot.value.data) v = std::bit_cast<double>(get_le<std::uint64_t>(in));
    slots.push_back(std::move(slot));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError("trailing bytes after checkpoint");
  ckpt.params = ModelParams(std::move(slots));
  check_params(ckpt.params, ckpt.config);
  return ckpt;
}

}  // namespace crossformer
