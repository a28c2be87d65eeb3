#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <random>

#include "plireg/io.hpp"

using namespace plireg;

namespace {

std::string temp_dir() {
    auto d = std::filesystem::temp_directory_path() / "plireg_io_test";
    std::filesystem::create_directories(d);
    return d.string();
}

}  // namespace

TEST_CASE("png round-trip 16-bit gray") {
    Image2D img(23, 17, 15.5);
    std::mt19937 rng(5);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    for (auto& v : img.data()) v = d(rng);
    const std::string path = temp_dir() + "/rt.png";
    write_png(path, img, 16);
    Image2D back = read_png(path, 15.5);
    REQUIRE(back.width() == img.width());
    REQUIRE(back.height() == img.height());
    CHECK(back.pixel_size() == Catch::Approx(15.5));
    for (std::size_t i = 0; i < img.size(); ++i)
        CHECK(back[i] == Catch::Approx(img[i]).margin(1.0 / 65535.0 + 1e-7));
}

TEST_CASE("tiff float32 round-trip is exact") {
    Image2D img(19, 11, 1.3);
    std::mt19937 rng(6);
    std::uniform_real_distribution<float> d(-2.0f, 3.0f);
    for (auto& v : img.data()) v = d(rng);
    const std::string path = temp_dir() + "/rt.tif";
    write_tiff_f32(path, img);
    Image2D back = read_tiff(path, 1.3);
    REQUIRE(back.width() == img.width());
    REQUIRE(back.height() == img.height());
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(back[i] == img[i]);
}

TEST_CASE("deformation field file round-trip preserves bits") {
    DeformationField f(9, 7);
    std::mt19937 rng(7);
    std::uniform_real_distribution<float> d(-5.0f, 5.0f);
    for (std::size_t i = 0; i < f.size(); ++i) {
        f.ux[i] = d(rng);
        f.uy[i] = d(rng);
    }
    const std::string path = temp_dir() + "/f.plidef";
    write_field(path, f, 15.5);
    double ps = 0;
    DeformationField back = read_field(path, &ps);
    CHECK(ps == 15.5);
    REQUIRE(back.width == 9);
    REQUIRE(back.height == 7);
    for (std::size_t i = 0; i < f.size(); ++i) {
        REQUIRE(back.ux[i] == f.ux[i]);
        REQUIRE(back.uy[i] == f.uy[i]);
    }

    // header check: magic bytes
    std::ifstream in(path, std::ios::binary);
    char magic[8];
    in.read(magic, 8);
    CHECK(std::string(magic, 8) == "PLIDEF01");
}

TEST_CASE("transform file round-trip") {
    auto t = TransformParams::similarity(12.25, -3.5, 0.7853981633974483, 11.98, {96.0, 80.0});
    const std::string path = temp_dir() + "/t.txt";
    write_transform(path, t, 15.5, 1.3);
    double fps = 0, mps = 0;
    auto back = read_transform(path, &fps, &mps);
    CHECK(back.kind == TransformKind::Similarity);
    CHECK(back.tx == Catch::Approx(t.tx));
    CHECK(back.angle == Catch::Approx(t.angle));
    CHECK(back.scale == Catch::Approx(t.scale));
    CHECK(back.center.x == Catch::Approx(96.0));
    CHECK(fps == Catch::Approx(15.5));
    CHECK(mps == Catch::Approx(1.3));
}

TEST_CASE("landmark csv round-trip and header") {
    std::vector<LandmarkSet> sets(2);
    sets[0].section = 0;
    sets[0].pairs = {{{1.5, 2.5}, {3.25, 4.0}}, {{10, 20}, {11, 19}}};
    sets[1].section = 3;
    sets[1].pairs = {{{0.0, 0.0}, {100.125, 50.5}}};
    const std::string path = temp_dir() + "/lm.csv";
    write_landmarks(path, sets);
    {
        std::ifstream in(path);
        std::string header;
        std::getline(in, header);
        CHECK(header == "section,x_fixed,y_fixed,x_moving,y_moving");
    }
    auto back = read_landmarks(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].pairs.size() == 2);
    CHECK(back[1].section == 3);
    CHECK(back[1].pairs[0].moving_px.x == Catch::Approx(100.125));
}

TEST_CASE("key-value file skips comments and trims") {
    std::istringstream in("a = 1\n# comment\n  spaced_key =  hello world \nb=2.5 # trailing\n");
    auto kv = KeyValueFile::parse(in);
    CHECK(kv.get_int("a") == 1);
    CHECK(kv.get("spaced_key") == "hello world");
    CHECK(kv.get_double("b") == Catch::Approx(2.5));
    CHECK_THROWS(kv.get("missing"));
}

TEST_CASE("volume sidecar lists missing slices") {
    VolumeMeta m;
    m.nx = 4;
    m.ny = 5;
    m.nz = 6;
    m.voxel_x_um = 15.5;
    m.voxel_y_um = 15.5;
    m.voxel_z_um = 60.0;
    m.modality = "transmittance";
    m.missing_slices = {2, 4};
    const std::string path = temp_dir() + "/vol.txt";
    write_volume_sidecar(path, m, "vol.raw");
    auto back = read_volume_sidecar(path);
    CHECK(back.nz == 6);
    CHECK(back.voxel_z_um == Catch::Approx(60.0));
    REQUIRE(back.missing_slices.size() == 2);
    CHECK(back.missing_slices[1] == 4);
}
