#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "avm/avmd.hpp"
#include "avm/rng.hpp"

using namespace avm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
    fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("crc32 known vectors") {
    // standard IEEE test vector
    CHECK(crc32_ieee("123456789", 9) == 0xcbf43926u);
    CHECK(crc32_ieee("", 0) == 0u);
}

TEST_CASE("round-trip preserves values, shapes, and metadata") {
    auto dir = temp_dir("avmd_roundtrip");
    Rng rng(1);
    std::vector<double> a(24), b(7);
    for (auto& v : a) v = rng.uniform(-1e6, 1e6);
    for (auto& v : b) v = rng.normal();

    AvmdWriter w;
    w.add("alpha", {2, 3, 4}, a);
    w.add("beta", {7}, b);
    w.set_meta(R"({"purpose": "test", "count": 3})");
    w.write(dir.string());

    AvmdReader r(dir.string());
    CHECK(r.names() == std::vector<std::string>{"alpha", "beta"});
    CHECK(r.shape("alpha") == Shape{2, 3, 4});
    auto ra = r.read("alpha");
    auto rb = r.read("beta");
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(ra[i] == a[i]);
    for (std::size_t i = 0; i < b.size(); ++i) CHECK(rb[i] == b[i]);
    CHECK(r.meta_json().find("purpose") != std::string::npos);
    CHECK(r.has("beta"));
    CHECK(!r.has("gamma"));
    CHECK_THROWS_AS(r.read("gamma"), AvmdError);
    fs::remove_all(dir);
}

TEST_CASE("writes are byte-deterministic") {
    auto d1 = temp_dir("avmd_det1"), d2 = temp_dir("avmd_det2");
    std::vector<double> data{1.5, -2.25, 3e-7, 1e300};
    for (const auto& d : {d1, d2}) {
        AvmdWriter w;
        w.add("x", {4}, data);
        w.set_meta(R"({"seed": 7})");
        w.write(d.string());
    }
    for (const char* f : {"manifest.json", "data.bin"}) {
        std::ifstream f1(d1 / f, std::ios::binary), f2(d2 / f, std::ios::binary);
        std::string s1((std::istreambuf_iterator<char>(f1)), {});
        std::string s2((std::istreambuf_iterator<char>(f2)), {});
        CHECK(s1 == s2);
    }
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST_CASE("duplicate names and shape mismatches are rejected at write time") {
    AvmdWriter w;
    std::vector<double> v{1, 2, 3};
    w.add("x", {3}, v);
    CHECK_THROWS_AS(w.add("x", {3}, v), AvmdFormatError);
    CHECK_THROWS_AS(w.add("y", {4}, v), AvmdFormatError);
    CHECK_THROWS_AS(w.set_meta("[1,2,3]"), AvmdFormatError);
}

TEST_CASE("corruption cases map to distinct error kinds") {
    auto dir = temp_dir("avmd_corrupt");
    std::vector<double> data{1, 2, 3, 4, 5, 6};
    {
        AvmdWriter w;
        w.add("x", {6}, data);
        w.write(dir.string());
    }

    SUBCASE("version mismatch names both versions") {
        std::ifstream in(dir / "manifest.json");
        std::string text((std::istreambuf_iterator<char>(in)), {});
        in.close();
        auto pos = text.find("\"version\": 1");
        REQUIRE(pos != std::string::npos);
        text.replace(pos, 12, "\"version\": 2");
        std::ofstream(dir / "manifest.json") << text;
        CHECK_THROWS_WITH_AS(AvmdReader(dir.string()), doctest::Contains("version 2"),
                             AvmdVersionError);
    }

    SUBCASE("truncated data.bin fails at manifest validation") {
        fs::resize_file(dir / "data.bin", 3 * sizeof(double));
        CHECK_THROWS_AS(AvmdReader(dir.string()), AvmdTruncationError);
    }

    SUBCASE("flipped payload byte fails the checksum") {
        std::fstream f(dir / "data.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(9);
        char c;
        f.seekg(9);
        f.get(c);
        c = static_cast<char>(c ^ 0x40);
        f.seekp(9);
        f.put(c);
        f.close();
        AvmdReader r(dir.string());
        CHECK_THROWS_AS(r.read("x"), AvmdChecksumError);
    }

    SUBCASE("garbage manifest is a format error") {
        std::ofstream(dir / "manifest.json") << "not json at all {";
        CHECK_THROWS_AS(AvmdReader(dir.string()), AvmdFormatError);
    }

    fs::remove_all(dir);
}
