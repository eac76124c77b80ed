#include "fmc/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace fmc {

Tensor &ParameterSet::add(const std::string &name, Tensor value) {
  if (contains(name))
    throw std::invalid_argument("duplicate parameter name: " + name);
  entries_.emplace_back(name, std::move(value));
  return entries_.back().second;
}

Tensor &ParameterSet::get(const std::string &name) {
  for (auto &[n, t] : entries_)
    if (n == name)
      return t;
  throw std::out_of_range("no parameter named " + name);
}

const Tensor &ParameterSet::get(const std::string &name) const {
  return const_cast<ParameterSet *>(this)->get(name);
}

bool ParameterSet::contains(const std::string &name) const {
  for (const auto &entry : entries_)
    if (entry.first == name)
      return true;
  return false;
}

Index ParameterSet::total_numel() const {
  Index n = 0;
  for (const auto &entry : entries_)
    n += entry.second.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto &entry : entries_)
    entry.second.zero_grad();
}

std::size_t ParameterSet::assign_from(const ParameterSet &other,
                                      bool require_all) {
  std::size_t copied = 0;
  for (auto &[name, t] : entries_) {
    if (!other.contains(name)) {
      if (require_all)
        throw std::runtime_error("checkpoint is missing parameter " + name);
      continue;
    }
    const Tensor &src = other.get(name);
    if (src.shape() != t.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + name + ": " +
                               shape_str(src.shape()) + " vs " +
                               shape_str(t.shape()));
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
    ++copied;
  }
  return copied;
}

void ParameterSet::append(const ParameterSet &other, const std::string &prefix) {
  for (const auto &[name, t] : other.entries_)
    add(prefix + name, t);
}

namespace {

constexpr char kMagic[4] = {'F', 'M', 'C', 'K'};

template <typename T> void put(std::vector<unsigned char> &out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFFu));
}

class Reader {
public:
  explicit Reader(const std::vector<unsigned char> &b) : bytes_(b) {}

  template <typename T> T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(U));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      bits |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return std::bit_cast<T>(bits);
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char *>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      throw std::runtime_error("checkpoint truncated");
  }
  const std::vector<unsigned char> &bytes_;
  std::size_t pos_ = 0;
};

} // namespace

std::vector<unsigned char> serialize_checkpoint(const ParameterSet &params) {
  std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
  put(out, static_cast<std::uint32_t>(params.size()));
  for (const auto &[name, t] : params.entries()) {
    put(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put(out, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape())
      put(out, static_cast<std::uint64_t>(d));
    for (double v : t.data())
      put(out, v);
  }
  return out;
}

ParameterSet deserialize_checkpoint(const std::vector<unsigned char> &bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw std::runtime_error("not an FMCK checkpoint");
  Reader r(bytes);
  r.str(4);
  const auto count = r.get<std::uint32_t>();
  ParameterSet params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8)
      throw std::runtime_error("checkpoint entry " + name + " has rank " +
                               std::to_string(rank));
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d)
      shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
    std::vector<double> values(static_cast<std::size_t>(numel_of(shape)));
    for (double &v : values)
      v = r.get<double>();
    params.add(name, Tensor::from(std::move(shape), std::move(values)));
  }
  if (!r.done())
    throw std::runtime_error("checkpoint has trailing bytes");
  return params;
}

void save_checkpoint(const std::filesystem::path &path,
                     const ParameterSet &params) {
  const auto bytes = serialize_checkpoint(params);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f)
    throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char *>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f)
    throw std::runtime_error("failed writing " + path.string());
}

ParameterSet load_checkpoint(const std::filesystem::path &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

} // namespace fmc
