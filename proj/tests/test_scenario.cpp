// SPDX-License-Identifier: Apache-2.0
//
// mimo-lr: low-rank MIMO channel estimation laboratory
// Copyright (C) 2026 The mimo-lr authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ------------------------------------------------------------------------

#include <catch_amalgamated.hpp>

#include "mlr/scenario.hpp"

#include <filesystem>
#include <fstream>

using namespace mlr;

namespace
{

// Scenario with no reflectors, BS at the origin, both arrays looking along +x.
Scenario bare_scenario()
{
    Scenario s;
    s.id = "bare";
    s.bs_position = {0.0, 0.0, 1.5};
    s.bounds_min = {-100.0, -100.0};
    s.bounds_max = {100.0, 100.0};
    s.reference_gain_db = 0.0;
    return s;
}

std::string temp_path(const std::string &name)
{
    return (std::filesystem::temp_directory_path() / ("mlr_test_" + name)).string();
}

// Independent bounce solver: project both ends on the plane, split the in-plane offset in
// proportion to their heights above it (equal-angle reflection).
struct BounceOracle
{
    Vec3 hit;
    double path;
};

BounceOracle bounce_oracle(const Vec3 &bs, const Vec3 &ue, const Reflector &f)
{
    auto d = [&](const Vec3 &p) {
        return (p[0] - f.center[0]) * f.normal[0] + (p[1] - f.center[1]) * f.normal[1] + (p[2] - f.center[2]) * f.normal[2];
    };
    const double h1 = d(bs), h2 = d(ue);
    Vec3 p1, p2;
    for (int k = 0; k < 3; ++k)
    {
        p1[k] = bs[k] - h1 * f.normal[k];
        p2[k] = ue[k] - h2 * f.normal[k];
    }
    Vec3 hit;
    double in_plane2 = 0.0;
    for (int k = 0; k < 3; ++k)
    {
        hit[k] = p1[k] + (p2[k] - p1[k]) * h1 / (h1 + h2);
        in_plane2 += (p2[k] - p1[k]) * (p2[k] - p1[k]);
    }
    return {hit, std::sqrt(in_plane2 + (h1 + h2) * (h1 + h2))};
}

std::pair<double, double> angles_of(const Vec3 &from, const Vec3 &to, double boresight)
{
    const double dx = to[0] - from[0], dy = to[1] - from[1], dz = to[2] - from[2];
    double az = std::atan2(dy, dx) - boresight;
    while (az > std::numbers::pi)
        az -= 2 * std::numbers::pi;
    while (az <= -std::numbers::pi)
        az += 2 * std::numbers::pi;
    return {az, std::atan2(dz, std::hypot(dx, dy))};
}

} // namespace

TEST_CASE("Scenario - generation is deterministic and seed dependent")
{
    auto cfg = crossroad_template();
    auto a = generate_scenario(cfg, 7);
    auto b = generate_scenario(cfg, 7);
    auto c = generate_scenario(cfg, 8);
    CHECK(a == b);
    CHECK(a.reflectors.size() == 3);
    CHECK(a.reflectors != c.reflectors);
}

TEST_CASE("Scenario - config validation names the offending field")
{
    auto cfg = crossroad_template();
    cfg.trajectories.clear();
    try
    {
        generate_scenario(cfg, 1);
        FAIL("expected InvalidConfig");
    }
    catch (const InvalidConfig &e)
    {
        CHECK(e.field() == "trajectories");
    }

    cfg = crossroad_template();
    cfg.bs_position = {0.0, -2.0, 6.0};
    CHECK_THROWS_AS(generate_scenario(cfg, 1), InvalidConfig);

    cfg = crossroad_template();
    cfg.fixed_reflectors.push_back({{10, 0, 5}, {-1, 0, 0}, 3, 10, -1.0});
    CHECK_THROWS_AS(generate_scenario(cfg, 1), InvalidConfig);
}

TEST_CASE("Scenario - pure LOS geometry")
{
    auto s = bare_scenario();
    const Vec3 ue{0.0, 30.0, 1.5}; // due north, same height
    auto rs = rays_at_position(s, ue, 5);
    REQUIRE(rs.rays.size() == 1);
    const auto &r = rs.rays[0];
    CHECK(r.dod_el == 0.0);
    CHECK(r.doa_el == 0.0);
    CHECK(r.delay == Catch::Approx(30.0 / kSpeedOfLight).epsilon(1e-15));
    CHECK(r.dod_az == Catch::Approx(-std::numbers::pi / 2)); // UE looks south to the BS
    CHECK(r.doa_az == Catch::Approx(std::numbers::pi / 2));
    const double lambda = kSpeedOfLight / 28e9;
    CHECK(r.power == Catch::Approx(std::pow(lambda / (4 * std::numbers::pi * 30.0), 2)).epsilon(1e-14));
    CHECK(rs.position_id == 5);
}

TEST_CASE("Scenario - recurrence: same position gives the identical ray set")
{
    auto s = generate_scenario(crossroad_template(), 3);
    for (const auto &t : s.trajectories)
        for (const auto &p : sample_trajectory(t, s.ue_height))
            CHECK(rays_at_position(s, p) == rays_at_position(s, p));
}

TEST_CASE("Scenario - single mirror reflector delay")
{
    auto s = bare_scenario();
    s.reflectors.push_back({{20.0, 0.0, 5.0}, {-1.0, 0.0, 0.0}, 50.0, 20.0, 6.0});
    const Vec3 ue{5.0, 10.0, 1.5};
    auto rs = rays_at_position(s, ue);
    REQUIRE(rs.rays.size() == 2);
    // BS at x=0, UE at x=5: distances to the wall are 20 and 15
    const double d = std::hypot(10.0, 20.0 + 15.0);
    CHECK(rs.rays[1].delay == Catch::Approx(d / kSpeedOfLight).epsilon(1e-14));
    CHECK(rs.rays[1].power < rs.rays[0].power);
}

TEST_CASE("Scenario - mirror paths agree with an independent bounce solver")
{
    Rng rng(11);
    int checked = 0;
    for (int trial = 0; trial < 100; ++trial)
    {
        Scenario s = bare_scenario();
        s.bs_position = {uniform(rng, -5, 5), uniform(rng, -5, 5), uniform(rng, 3, 10)};
        s.bs_boresight_az = uniform(rng, -3, 3);
        s.ue_boresight_az = uniform(rng, -3, 3);
        const double bearing = uniform(rng, -std::numbers::pi, std::numbers::pi);
        const double dist = uniform(rng, 15, 40);
        Reflector f{{dist * std::cos(bearing), dist * std::sin(bearing), 10.0},
                    {-std::cos(bearing), -std::sin(bearing), 0.0},
                    1000.0,
                    40.0,
                    uniform(rng, 0, 10)};
        s.reflectors = {f};
        const Vec3 ue{uniform(rng, -10, 10), uniform(rng, -10, 10), 1.5};
        auto rs = rays_at_position(s, ue);
        REQUIRE(rs.rays.size() == 2);
        const Ray &r = rs.rays[1];
        auto o = bounce_oracle(s.bs_position, ue, f);
        CHECK(std::abs(r.delay * kSpeedOfLight - o.path) < 1e-9);
        auto [doa_az, doa_el] = angles_of(s.bs_position, o.hit, s.bs_boresight_az);
        auto [dod_az, dod_el] = angles_of(ue, o.hit, s.ue_boresight_az);
        CHECK(std::abs(std::remainder(r.doa_az - doa_az, 2 * std::numbers::pi)) < 1e-9);
        CHECK(std::abs(r.doa_el - doa_el) < 1e-9);
        CHECK(std::abs(std::remainder(r.dod_az - dod_az, 2 * std::numbers::pi)) < 1e-9);
        CHECK(std::abs(r.dod_el - dod_el) < 1e-9);
        ++checked;
    }
    CHECK(checked == 100);
}

TEST_CASE("Scenario - generated ray sets satisfy invariants")
{
    auto s = generate_scenario(crossroad_template(), 5);
    std::size_t max_p = 0;
    for (const auto &t : s.trajectories)
        for (const auto &p : sample_trajectory(t, s.ue_height))
        {
            auto rs = rays_at_position(s, p);
            CHECK_NOTHROW(rs.validate());
            CHECK(rs.rays.front().delay > 0.0);
            CHECK(rs.synchronized().rays.front().delay == 0.0);
            max_p = std::max(max_p, rs.rays.size());
        }
    CHECK(max_p <= 4);
}

TEST_CASE("Scenario - trajectory sampling spacing")
{
    Trajectory t{0, {{0, 0}, {3, 0}, {3, 2.5}}, 1.0};
    auto pts = sample_trajectory(t, 1.5);
    REQUIRE(pts.size() == 6);
    CHECK(pts[3] == Vec3{3, 0, 1.5});
    CHECK(pts[5][1] == Catch::Approx(2.0));
    CHECK(make_position_id(2, 17) == 200017u);
}

TEST_CASE("Scenario - passage fading moments")
{
    RaySet rs;
    rs.rays = {{0, 0, 0, 0, 0.0, 1.0}, {0, 0, 0, 0, 1e-9, 4.0}};
    Rng rng(21);
    const int n = 1000000;
    double v0 = 0.0, v1 = 0.0;
    cx cross{};
    for (int k = 0; k < n; ++k)
    {
        auto a = sample_passage(rs, rng);
        v0 += std::norm(a[0]);
        v1 += std::norm(a[1]);
        cross += a[0] * std::conj(a[1]);
    }
    CHECK(v0 / n >= 0.99);
    CHECK(v0 / n <= 1.01);
    CHECK(v1 / n == Catch::Approx(4.0).epsilon(0.01));
    // normalized cross-correlation
    CHECK(std::abs(cross / double(n)) / 2.0 < 0.01);

    Rng r1(5), r2(5);
    CHECK(sample_passage(rs, r1) == sample_passage(rs, r2));
}

TEST_CASE("Scenario - ray file round trip")
{
    auto s = generate_scenario(crossroad_template(), 9);
    std::map<std::uint32_t, RaySet> sets;
    for (const auto &t : s.trajectories)
    {
        auto pts = sample_trajectory(t, s.ue_height);
        for (std::uint32_t i = 0; i < pts.size(); i += 7)
        {
            const auto id = make_position_id(t.id, i);
            sets[id] = rays_at_position(s, pts[i], id);
        }
    }
    const auto path = temp_path("rays.csv");
    write_rays(path, sets);
    auto loaded = load_rays(path);
    REQUIRE(loaded.size() == sets.size());
    for (const auto &[id, rs] : sets)
    {
        const auto &l = loaded.at(id);
        REQUIRE(l.rays.size() == rs.rays.size());
        for (int k = 0; k < 3; ++k)
            CHECK(l.position[k] == rs.position[k]);
        for (std::size_t p = 0; p < rs.rays.size(); ++p)
            CHECK(l.rays[p] == rs.rays[p]); // 17 significant digits round-trip exactly
    }
    std::filesystem::remove(path);
}

TEST_CASE("Scenario - ray file errors")
{
    const auto path = temp_path("bad_rays.csv");
    const std::string header = "position_id,x,y,z,dod_az,dod_el,doa_az,doa_el,delay_s,power_lin\n";
    auto write = [&](const std::string &body) {
        std::ofstream(path) << header << body;
    };

    write("1,0,0,1.5,0.1,0,0.2,0,1e-7,1\n1,0,0,1.5,0.3,0,0.1,0,2e-7,0.5\n2,5,0,1.5,0,0,0,0,1e-7,1\n");
    CHECK(load_rays(path).size() == 2);

    write("1,0,0,1.5,0.1,0,0.2,0,1e-7,-1\n");
    CHECK_THROWS_AS(load_rays(path), InvariantViolation);

    write("1,0,0,1.5,0.1,0,0.2,0,1e-7\n");
    try
    {
        load_rays(path);
        FAIL("expected ParseError");
    }
    catch (const ParseError &e)
    {
        CHECK(e.line() == 2);
    }

    write("1,0,0,1.5,0.1,0,0.2,0,1e-7,1\n1,0,0,1.5,0.1,0,0.2,0,abc,1\n");
    CHECK_THROWS_AS(load_rays(path), ParseError);

    write("1,0,0,1.5,0.1,0,0.2,0,1e-7,1\n2,0,0,1.5,0.1,0,0.2,0,1e-7,1\n1,0,0,1.5,0.1,0,0.2,0,2e-7,1\n");
    CHECK_THROWS_AS(load_rays(path), InvariantViolation);

    write("1,0,0,1.5,0.1,0,0.2,0,2e-7,1\n1,0,0,1.5,0.1,0,0.2,0,1e-7,1\n");
    CHECK_THROWS_AS(load_rays(path), InvariantViolation);

    write("1,0,0,1.5,4.0,0,0.2,0,1e-7,1\n");
    CHECK_THROWS_AS(load_rays(path), InvariantViolation);

    write("1,0,0,1.5,0.1,0,0.2,0,0,1\n1,0,0,1.5,0.1,0,0.2,0,1e-6,1\n");
    CHECK_THROWS_AS(load_rays(path, 5e-7), InvariantViolation);

    std::ofstream(path) << "id,x\n";
    CHECK_THROWS_AS(load_rays(path), ParseError);
    std::filesystem::remove(path);
}

TEST_CASE("Scenario - JSON config parsing")
{
    auto j = nlohmann::json::parse(R"({
        "id": "demo",
        "bs_position": [-8, -8, 6],
        "trajectories": [{"id": 4, "waypoints": [[-20, -2], [20, -2]], "spacing_m": 2.0}],
        "random_reflectors": {"count": 2, "distance_m": [15, 25]}
    })");
    auto c = scenario_config_from_json(j);
    CHECK(c.id == "demo");
    CHECK(c.trajectories.size() == 1);
    CHECK(c.trajectories[0].id == 4);
    CHECK(c.trajectories[0].spacing == 2.0);
    CHECK(c.random_reflectors.count == 2);
    CHECK(c.random_reflectors.distance_min == 15.0);

    j["carrier_frequency_hz"] = "fast";
    try
    {
        scenario_config_from_json(j);
        FAIL("expected InvalidConfig");
    }
    catch (const InvalidConfig &e)
    {
        CHECK(e.field() == "carrier_frequency_hz");
    }

    for (const char *name : {"crossroad_a.json", "crossroad_b.json"})
    {
        auto cfg = load_scenario_config(std::string(MLR_SOURCE_DIR) + "/configs/" + name);
        CHECK_NOTHROW(generate_scenario(cfg, 1));
    }
}
