#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "io_util.hpp"
#include "numerics.hpp"

using namespace saefin;

namespace {
std::filesystem::path temp_dir() {
    auto dir = std::filesystem::temp_directory_path() / "saefin_io_test";
    std::filesystem::create_directories(dir);
    return dir;
}
}  // namespace

TEST_CASE("sha256 known-answer vectors") {
    // FIPS 180-4 example digests.
    CHECK(io::sha256_bytes("", 0) ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    const std::string abc = "abc";
    CHECK(io::sha256_bytes(abc.data(), abc.size()) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("csv writer emits CRLF rows, quotes when needed, and round-trips") {
    io::CsvWriter w({"name", "value"});
    w.add_row({"plain", io::CsvWriter::format_number(1.5)});
    w.add_row({"has,comma", "x"});
    w.add_row({"has\"quote", "y"});
    CHECK(w.content() ==
          "name,value\r\nplain,1.5\r\n\"has,comma\",x\r\n\"has\"\"quote\",y\r\n");

    const auto path = temp_dir() / "t.csv";
    w.write(path);
    const io::CsvTable t = io::read_csv(path);
    REQUIRE(t.header.size() == 2);
    REQUIRE(t.rows.size() == 3);
    CHECK(t.rows[1][0] == "has,comma");
    CHECK(t.rows[2][0] == "has\"quote");
    CHECK(t.column("value") == 1);
    CHECK_THROWS(t.column("missing"));
}

TEST_CASE("csv writer rejects ragged rows") {
    io::CsvWriter w({"a", "b"});
    CHECK_THROWS(w.add_row({"only-one"}));
}

TEST_CASE("tensor file round-trips matrices bit-exactly") {
    num::RngStream rng(4);
    num::Matrix a(3, 5);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
    num::Matrix b(1, 1, {0.1 + 0.2});

    io::TensorFile tf;
    tf.meta_json = R"({"kind":"test","version":1})";
    tf.add("alpha", a);
    tf.add("beta", b);
    const auto path = temp_dir() / "t.ckpt";
    tf.save(path);

    const io::TensorFile back = io::TensorFile::load(path);
    CHECK(back.meta_json == tf.meta_json);
    CHECK(back.has("alpha"));
    CHECK_FALSE(back.has("gamma"));
    CHECK(num::max_abs_diff(back.get("alpha"), a) == 0.0);
    CHECK(back.get("beta")[0] == b[0]);
    CHECK_THROWS(back.get("gamma"));
}

TEST_CASE("tensor file rejects garbage") {
    const auto path = temp_dir() / "bad.ckpt";
    io::atomic_write(path, "definitely not a checkpoint");
    CHECK_THROWS(io::TensorFile::load(path));
}

TEST_CASE("atomic_write replaces content completely") {
    const auto path = temp_dir() / "a.txt";
    io::atomic_write(path, "first version with some length");
    io::atomic_write(path, "second");
    CHECK(io::read_file(path) == "second");
}
