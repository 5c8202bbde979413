#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace eo;

TEST(Date, ParsesStrictIsoDates) {
  EXPECT_EQ(Date::parse("2018-04-06").str(), "2018-04-06");
  EXPECT_EQ((Date::parse("2018-03-31") + 1).str(), "2018-04-01");
  EXPECT_EQ(Date::parse("2020-03-01") - Date::parse("2020-02-28"), 2);
  for (const char* bad : {"2018-4-06", "2018-02-30", "20180406", "2018-04-06T00:00", "", "abcd-ef-gh"})
    EXPECT_FALSE(Date::try_parse(bad).has_value()) << bad;
  EXPECT_THROW(Date::parse("2018/04/06"), InputError);
}

TEST(Numbers, ParseAndFormat) {
  EXPECT_EQ(parse_double(" 3.25 "), 3.25);
  EXPECT_FALSE(parse_double("3.2x").has_value());
  EXPECT_FALSE(parse_double("").has_value());
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(1.0 / 3.0), "0.3333333333333333");
  EXPECT_EQ(format_fixed(0.4375, 3), "0.438");
  EXPECT_EQ(format_fixed(0.3125, 3), "0.312");
  EXPECT_EQ(format_fixed(-41.66666, 1), "-41.7");
}

TEST(Hash, Sha256KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Csv, QuotesOnlyWhenNeeded) {
  const std::vector<std::string> fields{"a", "b c", "d,e", "say \"hi\"", "x\ny", " pad"};
  EXPECT_EQ(csv::format_row(fields), "a,b c,\"d,e\",\"say \"\"hi\"\"\",\"x\ny\",\" pad\"\n");
}

TEST(Csv, ParsesQuotedMultilineFieldsAndCrlf) {
  auto t = csv::parse("h1,h2\r\n\"line1\nline2\",\"a,\"\"b\"\"\"\r\n\r\nplain,\r\n");
  ASSERT_EQ(t.header, (std::vector<std::string>{"h1", "h2"}));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0][0], "line1\nline2");
  EXPECT_EQ(t.rows[0][1], "a,\"b\"");
  EXPECT_EQ(t.rows[1], (std::vector<std::string>{"plain", ""}));
  EXPECT_EQ(t.column("h2"), 1u);
}

TEST(Csv, RejectsMalformedQuoting) {
  EXPECT_THROW(csv::parse("a,b\n\"open,1\n"), InputError);
  EXPECT_THROW(csv::parse("a,b\n\"x\"y,1\n"), InputError);
}

TEST(Csv, RandomTablesRoundTrip) {
  std::mt19937_64 gen(7);
  const std::string alphabet = "ab ,\"\n\r;x'";
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t cols = 1 + gen() % 5;
    std::vector<std::string> header;
    for (std::size_t c = 0; c < cols; ++c) header.push_back(fmt::format("c{}", c));
    std::vector<std::vector<std::string>> rows(gen() % 6);
    for (auto& row : rows) {
      for (std::size_t c = 0; c < cols; ++c) {
        std::string cell;
        const std::size_t len = gen() % 8;
        for (std::size_t k = 0; k < len; ++k) cell.push_back(alphabet[gen() % alphabet.size()]);
        row.push_back(cell);
      }
      // a row of one empty cell is indistinguishable from a blank line
      if (cols == 1 && row[0].empty()) row[0] = "x";
    }
    auto back = csv::parse(csv::format(header, rows));
    ASSERT_EQ(back.header, header);
    ASSERT_EQ(back.rows, rows) << "trial " << trial;
  }
}
