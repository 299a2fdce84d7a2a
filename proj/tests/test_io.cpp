#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "ndcrf/image_io.hpp"
#include "ndcrf/npy.hpp"
#include "ndcrf/tensor.hpp"
#include "test_helpers.hpp"

namespace fs = std::filesystem;
using ndcrf::LabelMap;
using ndcrf::Tensor;

namespace {

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Byte-exact npy v1.0 file the way numpy.save lays it out: header padded with
// spaces to a 64-byte boundary and terminated by a newline.
std::string numpy_style_file(const std::string& descr,
                             const std::string& shape,
                             const std::string& payload) {
  std::string dict = "{'descr': '" + descr +
                     "', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t unpadded = 10 + dict.size() + 1;
  const std::size_t padded = (unpadded + 63) / 64 * 64;
  dict.append(padded - unpadded, ' ');
  dict += '\n';
  std::string out("\x93NUMPY\x01\x00", 8);
  out += static_cast<char>(dict.size() & 0xff);
  out += static_cast<char>(dict.size() >> 8);
  out += dict;
  out += payload;
  return out;
}

std::string float_payload(const std::vector<float>& v) {
  std::string s(v.size() * 4, '\0');
  std::memcpy(s.data(), v.data(), s.size());
  return s;
}

}  // namespace

TEST_CASE("tensor npy round trip is bit exact") {
  const fs::path dir = testutil::temp_dir("npy_tensor");
  Tensor t = testutil::random_tensor({3, 4, 5}, 2, 7, -10.0, 10.0);
  // Values that stress the encoding: signed zero, denormal, huge.
  t.at(0, 0) = -0.0f;
  t.at(1, 1) = 1e-42f;
  t.at(2, 0) = 3.0e38f;

  ndcrf::write_tensor(t, dir / "t.npy");
  Tensor r = ndcrf::read_tensor(dir / "t.npy");

  CHECK(r.extents() == t.extents());
  CHECK(r.channels() == t.channels());
  REQUIRE(r.size() == t.size());
  const auto* a = reinterpret_cast<const std::uint32_t*>(t.data());
  const auto* b = reinterpret_cast<const std::uint32_t*>(r.data());
  for (std::int64_t i = 0; i < t.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("rank-1 tensors round trip through the (n,) shape form") {
  const fs::path dir = testutil::temp_dir("npy_rank1");
  Tensor t({7}, 1, {1, 2, 3, 4, 5, 6, 7});
  ndcrf::write_tensor(t, dir / "t.npy");
  Tensor r = ndcrf::read_tensor(dir / "t.npy");
  CHECK(r.extents() == std::vector<std::int64_t>{7});
  CHECK(r.channels() == 1);
  CHECK(r.storage() == t.storage());
}

TEST_CASE("label npy round trip") {
  const fs::path dir = testutil::temp_dir("npy_labels");
  LabelMap l({2, 3}, {0, 1, 2, 3, 254, 255});
  ndcrf::write_labels(l, dir / "l.npy");
  LabelMap r = ndcrf::read_labels(dir / "l.npy");
  CHECK(r.extents == l.extents);
  CHECK(r.labels == l.labels);
}

TEST_CASE("reader accepts a numpy-written header layout") {
  const fs::path dir = testutil::temp_dir("npy_numpy_layout");
  write_bytes(dir / "g.npy",
              numpy_style_file("<f4", "(2, 3)",
                               float_payload({1, 2, 3, 4, 5, 6})));
  Tensor t = ndcrf::read_tensor(dir / "g.npy");
  CHECK(t.extents() == std::vector<std::int64_t>{2});
  CHECK(t.channels() == 3);
  for (int i = 0; i < 6; ++i) CHECK(t.data()[i] == float(i + 1));

  write_bytes(dir / "l.npy", numpy_style_file("|u1", "(4,)",
                                              std::string("\x00\x01\x02\x03", 4)));
  LabelMap l = ndcrf::read_labels(dir / "l.npy");
  CHECK(l.extents == std::vector<std::int64_t>{4});
  CHECK(l.labels == std::vector<std::uint8_t>{0, 1, 2, 3});
}

TEST_CASE("npy failure taxonomy") {
  const fs::path dir = testutil::temp_dir("npy_errors");

  SUBCASE("missing file") {
    CHECK_THROWS_AS(ndcrf::read_tensor(dir / "absent.npy"), ndcrf::IoError);
  }
  SUBCASE("bad magic") {
    write_bytes(dir / "bad.npy", "NOTNUMPYDATA");
    CHECK_THROWS_AS(ndcrf::read_tensor(dir / "bad.npy"), ndcrf::NpyHeaderError);
  }
  SUBCASE("unsupported version") {
    std::string f = numpy_style_file("<f4", "(1, 1)", float_payload({1}));
    f[6] = 2;  // claim v2.0
    write_bytes(dir / "v2.npy", f);
    CHECK_THROWS_AS(ndcrf::read_tensor(dir / "v2.npy"), ndcrf::NpyHeaderError);
  }
  SUBCASE("wrong dtype") {
    write_bytes(dir / "f8.npy",
                numpy_style_file("<f8", "(1, 1)", std::string(8, '\0')));
    CHECK_THROWS_AS(ndcrf::read_tensor(dir / "f8.npy"), ndcrf::NpyDtypeError);
  }
  SUBCASE("fortran order rejected") {
    std::string dict =
        "{'descr': '<f4', 'fortran_order': True, 'shape': (1, 1), }";
    const std::size_t unpadded = 10 + dict.size() + 1;
    const std::size_t padded = (unpadded + 63) / 64 * 64;
    dict.append(padded - unpadded, ' ');
    dict += '\n';
    std::string f("\x93NUMPY\x01\x00", 8);
    f += static_cast<char>(dict.size() & 0xff);
    f += static_cast<char>(dict.size() >> 8);
    f += dict + float_payload({1});
    write_bytes(dir / "fortran.npy", f);
    CHECK_THROWS_AS(ndcrf::read_tensor(dir / "fortran.npy"),
                    ndcrf::NpyDtypeError);
  }
  SUBCASE("truncated payload") {
    std::string f = numpy_style_file("<f4", "(4, 2)", float_payload({1, 2}));
    write_bytes(dir / "short.npy", f);
    CHECK_THROWS_AS(ndcrf::read_tensor(dir / "short.npy"),
                    ndcrf::NpyTruncatedError);
  }
  SUBCASE("labels reject float files and tensors reject label files") {
    write_bytes(dir / "f.npy", numpy_style_file("<f4", "(1, 1)",
                                                float_payload({1})));
    CHECK_THROWS_AS(ndcrf::read_labels(dir / "f.npy"), ndcrf::NpyDtypeError);
    write_bytes(dir / "u.npy",
                numpy_style_file("|u1", "(2,)", std::string(2, '\x01')));
    CHECK_THROWS_AS(ndcrf::read_tensor(dir / "u.npy"), ndcrf::NpyDtypeError);
  }
}

TEST_CASE("png round trip on the 8-bit grid is exact") {
  const fs::path dir = testutil::temp_dir("png");

  SUBCASE("rgb") {
    Tensor t({5, 4}, 3);
    testutil::Rng rng(3);
    for (float& v : t.storage())
      v = static_cast<float>(static_cast<int>(rng.unit() * 256.0) % 256) / 255.0f;
    ndcrf::write_png(t, dir / "rgb.png");
    Tensor r = ndcrf::read_png(dir / "rgb.png");
    CHECK(r.extents() == t.extents());
    CHECK(r.channels() == 3);
    for (std::int64_t i = 0; i < t.size(); ++i)
      CHECK(r.data()[i] == t.data()[i]);
  }
  SUBCASE("grayscale") {
    Tensor t({2, 3}, 1, {0.0f, 1.0f, 10.0f / 255, 128.0f / 255, 1.0f, 0.5f});
    t.at(5, 0) = 127.0f / 255;
    ndcrf::write_png(t, dir / "gray.png");
    Tensor r = ndcrf::read_png(dir / "gray.png");
    for (std::int64_t i = 0; i < t.size(); ++i)
      CHECK(r.data()[i] == t.data()[i]);
  }
  SUBCASE("values outside [0,1] are clamped on write") {
    Tensor t({1, 2}, 1, {-0.5f, 1.5f});
    ndcrf::write_png(t, dir / "clamp.png");
    Tensor r = ndcrf::read_png(dir / "clamp.png");
    CHECK(r.data()[0] == 0.0f);
    CHECK(r.data()[1] == 1.0f);
  }
  SUBCASE("3d tensors cannot be written as png") {
    CHECK_THROWS_AS(ndcrf::write_png(Tensor({2, 2, 2}, 1), dir / "x.png"),
                    ndcrf::ShapeError);
  }
}

TEST_CASE("label png spreads levels over the full range") {
  const fs::path dir = testutil::temp_dir("label_png");
  LabelMap l({1, 3}, {0, 1, 2});
  ndcrf::write_label_png(l, 3, dir / "l.png");
  Tensor r = ndcrf::read_png(dir / "l.png");
  CHECK(r.channels() == 1);
  CHECK(r.data()[0] == 0.0f);
  CHECK(r.data()[2] == 1.0f);
  CHECK(r.data()[1] > 0.3f);
  CHECK(r.data()[1] < 0.7f);
}

TEST_CASE("read_image dispatches on extension") {
  const fs::path dir = testutil::temp_dir("read_image");
  Tensor t = testutil::random_tensor({3, 3}, 3, 11);
  ndcrf::write_tensor(t, dir / "a.npy");
  Tensor rn = ndcrf::read_image(dir / "a.npy");
  CHECK(rn.storage() == t.storage());

  ndcrf::write_png(t, dir / "a.png");
  Tensor rp = ndcrf::read_image(dir / "a.png");
  CHECK(rp.extents() == t.extents());

  write_bytes(dir / "a.txt", "nope");
  CHECK_THROWS_AS(ndcrf::read_image(dir / "a.txt"), ndcrf::IoError);
}
