#include "dssl/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dssl {

namespace {

constexpr std::array<char, 5> kMagic{'D', 'S', 'S', 'L', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b.data(), 8);
}

void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

bool get_u64(std::istream& is, std::uint64_t& v) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return true;
}

[[noreturn]] void corrupt(const std::filesystem::path& path, const std::string& what) {
  throw std::runtime_error("checkpoint " + path.string() + ": " + what);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic.data(), kMagic.size());
  for (const auto& p : params) {
    put_u64(os, p.name.size());
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_u64(os, p.tensor.rank());
    for (auto e : p.tensor.shape()) put_u64(os, e);
    for (double v : p.tensor.data()) put_f64(os, v);
  }
  if (!os) throw std::runtime_error("write failed for checkpoint " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::array<char, 5> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) corrupt(path, "bad magic");
  std::vector<NamedTensor> out;
  std::uint64_t name_len = 0;
  while (get_u64(is, name_len)) {
    if (name_len > 4096) corrupt(path, "implausible name length");
    std::string name(name_len, '\0');
    std::uint64_t rank = 0;
    if (!is.read(name.data(), static_cast<std::streamsize>(name_len)) || !get_u64(is, rank) || rank == 0 || rank > 8) {
      corrupt(path, "truncated record header");
    }
    Shape shape(rank);
    for (auto& e : shape) {
      std::uint64_t v = 0;
      if (!get_u64(is, v) || v == 0) corrupt(path, "bad extents for " + name);
      e = v;
    }
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) {
      std::uint64_t bits = 0;
      if (!get_u64(is, bits)) corrupt(path, "truncated values for " + name);
      v = std::bit_cast<double>(bits);
    }
    out.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
  }
  if (!is.eof()) corrupt(path, "read error");
  return out;
}

void load_checkpoint_into(const std::filesystem::path& path, std::span<NamedTensor> params) {
  auto loaded = load_checkpoint(path);
  if (loaded.size() != params.size()) {
    corrupt(path, "holds " + std::to_string(loaded.size()) + " parameters, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (loaded[i].name != params[i].name || loaded[i].tensor.shape() != params[i].tensor.shape()) {
      corrupt(path, "parameter " + loaded[i].name + shape_str(loaded[i].tensor.shape()) + " does not match model " +
                        params[i].name + shape_str(params[i].tensor.shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_data();
    auto src = loaded[i].tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace dssl
