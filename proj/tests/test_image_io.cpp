#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "basinproj/image_io.hpp"

using namespace basinproj;
namespace fs = std::filesystem;

namespace {

std::span<const unsigned char> as_bytes(const std::string& s) {
  return {reinterpret_cast<const unsigned char*>(s.data()), s.size()};
}

ImageBuffer gradient_image(int h, int w) {
  ImageBuffer img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>((y * 7 + x * 3 + c * 11) % 17) / 16.0f;
  return img;
}

fs::path temp_dir() {
  const auto d = fs::temp_directory_path() / ("basinproj_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Ppm, DecodesMinimalHeader) {
  std::string bytes = "P6\n2 2\n255\n";
  for (int i = 0; i < 12; ++i) bytes.push_back(static_cast<char>(i * 20));
  const auto img = decode_ppm(as_bytes(bytes));
  EXPECT_EQ(img.height(), 2);
  EXPECT_EQ(img.width(), 2);
  EXPECT_FLOAT_EQ(img.at(1, 1, 2), 220.0f / 255.0f);
}

TEST(Ppm, SkipsComments) {
  std::string bytes = "P6\n# made by hand\n1 1\n255\n";
  bytes += std::string("\x10\x20\x30", 3);
  const auto img = decode_ppm(as_bytes(bytes));
  EXPECT_FLOAT_EQ(img.at(0, 0, 1), 32.0f / 255.0f);
}

TEST(Ppm, EncodeIsBitExact) {
  std::string bytes = "P6\n3 1\n255\n";
  for (int i = 0; i < 9; ++i) bytes.push_back(static_cast<char>(255 - i * 13));
  const auto img = decode_ppm(as_bytes(bytes));
  const auto again = encode_ppm(img);
  EXPECT_EQ(std::string(again.begin(), again.end()), bytes);
}

TEST(Ppm, MalformedInputReportsOffset) {
  try {
    decode_ppm(as_bytes("P6\n2 x\n255\n"));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_GT(e.offset(), 0u);
  }
  EXPECT_THROW(decode_ppm(as_bytes("P3\n1 1\n255\n000")), ParseError);
  EXPECT_THROW(decode_ppm(as_bytes("P6\n2 2\n255\n\x01\x02")), ParseError);
  EXPECT_THROW(decode_ppm(as_bytes("P6\n1 1\n65535\n\x01\x02\x03\x04\x05\x06")), ParseError);
}

TEST(ImageIo, NonImageBytesAreParseErrors) {
  EXPECT_THROW(decode_image(as_bytes("hello world, not an image")), ParseError);
  EXPECT_THROW(decode_png(as_bytes("\x89PNG\r\n\x1a\nbroken")), ParseError);
}

TEST(ImageIo, ConstantHalfRoundTripWithinQuantization) {
  const auto dir = temp_dir();
  const ImageBuffer half(5, 4, 0.5f);
  for (const char* name : {"half.ppm", "half.png"}) {
    write_image(half, dir / name);
    const auto back = read_image(dir / name);
    ASSERT_TRUE(back.same_shape(half));
    for (std::size_t i = 0; i < half.size(); ++i) EXPECT_LE(std::abs(back.data()[i] - 0.5f), 1.0f / 255.0f + 1e-6f);
  }
}

TEST(ImageIo, PngAndPpmAgree) {
  const auto img = gradient_image(9, 13);
  const auto a = decode_png(encode_png(img));
  const auto b = decode_ppm(encode_ppm(img));
  EXPECT_EQ(a, b);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_LE(std::abs(a.data()[i] - img.data()[i]), 0.5f / 255.0f + 1e-6f);
}

TEST(ImageIo, OutOfRangeValuesAreClampedOnWrite) {
  const ImageBuffer img(1, 1, std::vector<float>{-0.2f, 1.7f, 0.5f});
  const auto back = decode_ppm(encode_ppm(img));
  EXPECT_EQ(back.at(0, 0, 0), 0.0f);
  EXPECT_EQ(back.at(0, 0, 1), 1.0f);
}

TEST(ImageIo, MaskRoundTrip) {
  const auto dir = temp_dir();
  const auto m = make_box_mask(8, 8, Box{2, 2, 4, 4});
  write_mask(m, dir / "mask.png");
  const auto back = read_mask(dir / "mask.png");
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(back.data()[i], m.data()[i], 1.0 / 255.0);
  EXPECT_EQ(foreground_box(back), (Box{2, 2, 4, 4}));
}

TEST(ImageIo, MaskWithoutForegroundRejected) {
  const auto dir = temp_dir();
  write_mask(MaskBuffer(4, 4, 0.3f), dir / "weak.png");
  EXPECT_THROW(read_mask(dir / "weak.png"), DomainError);
}

TEST(ImageIo, MissingFileIsError) { EXPECT_THROW(read_image("/nonexistent/nothing.png"), Error); }

TEST(Csv, HeaderRowsAndLineEndings) {
  CsvWriter csv({"name", "value", "count"});
  csv.row("a", 0.5, 3);
  csv.row("b,c", 1e-10, -1);
  EXPECT_EQ(csv.rows(), 3u);
  EXPECT_EQ(csv.str(), "name,value,count\na,0.5,3\n\"b,c\",1e-10,-1\n");
  EXPECT_EQ(csv.str().find('\r'), std::string::npos);
  EXPECT_THROW(csv.row("only one"), ShapeError);
}

TEST(Csv, NumbersRoundTripAndUseDot) {
  for (double v : {0.1, 1.0 / 3.0, 12345.678, -2.5e-7}) EXPECT_EQ(std::stod(format_number(v)), v);
  EXPECT_EQ(format_number(0.25), "0.25");
  EXPECT_EQ(format_number(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_EQ(format_number(std::nan("")), "nan");
}

TEST(Csv, QuotesEmbeddedQuotes) {
  CsvWriter csv({"x"});
  csv.row("say \"hi\"");
  EXPECT_EQ(csv.str(), "x\n\"say \"\"hi\"\"\"\n");
}
