#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "plireg/field.hpp"
#include "plireg/transform.hpp"

using namespace plireg;

TEST_CASE("transform apply, compose, inverse") {
    auto t = TransformParams::similarity(3.0, -1.0, 0.3, 1.5, {10.0, 20.0});
    const Vec2 p{4.0, 7.0};
    const Vec2 q = t.apply(p);
    const Vec2 back = t.inverse().apply(q);
    CHECK(back.x == Catch::Approx(p.x).margin(1e-12));
    CHECK(back.y == Catch::Approx(p.y).margin(1e-12));

    auto a = TransformParams::rigid(1.0, 2.0, 0.4, {5, 5});
    auto ab = a.compose(t);
    const Vec2 direct = a.apply(t.apply(p));
    const Vec2 composed = ab.apply(p);
    CHECK(composed.x == Catch::Approx(direct.x).margin(1e-10));
    CHECK(composed.y == Catch::Approx(direct.y).margin(1e-10));
    CHECK(ab.kind == TransformKind::Similarity);  // closed under composition
}

TEST_CASE("angle normalization stays in (-pi, pi]") {
    auto t = TransformParams::rigid(0, 0, 3.5 * M_PI, {});
    CHECK(t.angle <= M_PI);
    CHECK(t.angle > -M_PI);
    CHECK(std::abs(std::remainder(t.angle - 3.5 * M_PI, 2 * M_PI)) < 1e-12);
    CHECK_THROWS_AS(TransformParams::similarity(0, 0, 0, -1.0, {}), std::invalid_argument);
}

TEST_CASE("compose_transforms collapses chains") {
    // single identity -> zero field
    auto zero = compose_transforms({TransformStep::parametric(TransformParams::identity())}, 8, 8);
    CHECK(zero.max_norm() == Catch::Approx(0.0));

    // warp by (3,0) then by (0,4): composite constant field (3,4)
    auto f = compose_transforms({TransformStep::parametric(TransformParams::translation(0.0, 4.0)),
                                 TransformStep::parametric(TransformParams::translation(3.0, 0.0))},
                                8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            CHECK(f.at(x, y).x == Catch::Approx(3.0));
            CHECK(f.at(x, y).y == Catch::Approx(4.0));
        }
}

TEST_CASE("field from transform and upsampling scale displacements") {
    auto t = TransformParams::translation(2.0, -1.0);
    DeformationField f = DeformationField::from_transform(t, 16, 16);
    CHECK(f.at(5, 5).x == Catch::Approx(2.0));
    DeformationField up = f.upsample_to(32, 32);
    CHECK(up.at(10, 10).x == Catch::Approx(4.0));
    CHECK(up.at(10, 10).y == Catch::Approx(-2.0));
}
