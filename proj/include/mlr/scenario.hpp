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

// Synthetic urban-crossing geometry: a base station, vertical facade reflectors and
// road-constrained trajectories. Rays are LOS plus single-bounce mirror paths.
// The link is uplink: the UE transmits (DoD at the UE), the BS receives (DoA at the BS).

#ifndef MLR_SCENARIO_HPP
#define MLR_SCENARIO_HPP

#include "mlr/errors.hpp"
#include "mlr/numerics.hpp"
#include "mlr/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace mlr
{

using Vec3 = std::array<double, 3>;

inline constexpr double kSpeedOfLight = 299792458.0;

namespace detail
{
inline Vec3 sub(const Vec3 &a, const Vec3 &b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 add(const Vec3 &a, const Vec3 &b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 scale(const Vec3 &a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline double dot(const Vec3 &a, const Vec3 &b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double length(const Vec3 &a) { return std::sqrt(dot(a, a)); }

// Map any angle to (-pi, pi].
inline double wrap_angle(double a)
{
    a = std::remainder(a, 2.0 * std::numbers::pi);
    if (a <= -std::numbers::pi)
        a += 2.0 * std::numbers::pi;
    return a;
}
} // namespace detail

struct Ray
{
    double dod_az = 0.0, dod_el = 0.0; // radians, at the transmitter (UE)
    double doa_az = 0.0, doa_el = 0.0; // radians, at the receiver (BS)
    double delay = 0.0;                // seconds
    double power = 0.0;                // linear mean power

    bool operator==(const Ray &) const = default;
};

struct RaySet
{
    std::uint32_t position_id = 0;
    Vec3 position{};
    std::vector<Ray> rays; // delays ascending

    // Copy with delays relative to the first arrival (the receiver synchronizes on it).
    RaySet synchronized() const
    {
        RaySet r = *this;
        if (!r.rays.empty())
        {
            const double t0 = r.rays.front().delay;
            for (auto &ray : r.rays)
                ray.delay -= t0;
        }
        return r;
    }

    double max_excess_delay() const { return rays.empty() ? 0.0 : rays.back().delay - rays.front().delay; }

    // Throws InvariantViolation on the first violated invariant.
    void validate(double tau_max = std::numeric_limits<double>::infinity()) const
    {
        if (rays.empty())
            throw InvariantViolation(position_id, "ray set is empty");
        for (std::size_t p = 0; p < rays.size(); ++p)
        {
            const Ray &r = rays[p];
            for (double a : {r.dod_az, r.dod_el, r.doa_az, r.doa_el})
                if (!std::isfinite(a) || a <= -std::numbers::pi || a > std::numbers::pi)
                    throw InvariantViolation(position_id, "angle outside (-pi, pi]");
            if (!(r.power > 0.0) || !std::isfinite(r.power))
                throw InvariantViolation(position_id, "power must be positive and finite");
            if (!(r.delay >= 0.0) || !std::isfinite(r.delay))
                throw InvariantViolation(position_id, "delay must be non-negative and finite");
            if (p > 0 && r.delay < rays[p - 1].delay)
                throw InvariantViolation(position_id, "delays not sorted ascending");
        }
        if (!(max_excess_delay() < tau_max))
            throw InvariantViolation(position_id, "excess delay exceeds tau_max");
    }

    bool operator==(const RaySet &) const = default;
};

// Vertical rectangular facet: plane through `center` with horizontal unit normal, extent
// |t| <= half_width along the horizontal tangent and |z - center.z| <= height / 2.
struct Reflector
{
    Vec3 center{};
    Vec3 normal{};
    double half_width = 0.0;
    double height = 0.0;
    double loss_db = 0.0;

    bool operator==(const Reflector &) const = default;
};

struct Trajectory
{
    std::uint32_t id = 0;
    std::vector<std::array<double, 2>> waypoints; // polyline in the ground plane
    double spacing = 1.0;                         // meters between samples

    bool operator==(const Trajectory &) const = default;
};

// Random facade placement. Facades sit at a random bearing around the origin and face it.
struct ReflectorSpec
{
    std::size_t count = 0;
    double distance_min = 12.0, distance_max = 30.0;
    double half_width_min = 4.0, half_width_max = 12.0;
    double height = 20.0;
    double loss_db_min = 6.0, loss_db_max = 12.0;
    double normal_jitter_deg = 15.0;
};

struct ScenarioConfig
{
    std::string id = "scenario";
    double carrier_frequency = 28e9;
    Vec3 bs_position{-8.0, -8.0, 6.0};
    double bs_boresight_az = std::numbers::pi / 4; // radians, array broadside azimuth
    double ue_boresight_az = 0.0;
    double ue_height = 1.5;
    double reference_gain_db = 90.0; // added to the free-space law so channels are O(1)
    std::array<double, 2> bounds_min{-40.0, -40.0};
    std::array<double, 2> bounds_max{40.0, 40.0};
    std::vector<Trajectory> trajectories;
    std::vector<Reflector> fixed_reflectors;
    ReflectorSpec random_reflectors;
};

struct Scenario
{
    std::string id;
    double carrier_frequency = 28e9;
    Vec3 bs_position{};
    double bs_boresight_az = 0.0;
    double ue_boresight_az = 0.0;
    double ue_height = 1.5;
    double reference_gain_db = 0.0;
    std::array<double, 2> bounds_min{}, bounds_max{};
    std::vector<Reflector> reflectors;
    std::vector<Trajectory> trajectories;

    double wavelength() const { return kSpeedOfLight / carrier_frequency; }

    bool operator==(const Scenario &) const = default;
};

// Samples every `spacing` meters of arc length along the polyline, starting at the first waypoint.
inline std::vector<Vec3> sample_trajectory(const Trajectory &t, double height)
{
    std::vector<Vec3> pts;
    if (t.waypoints.empty())
        return pts;
    pts.push_back({t.waypoints[0][0], t.waypoints[0][1], height});
    double carry = 0.0; // distance already walked past the last sample
    for (std::size_t k = 1; k < t.waypoints.size(); ++k)
    {
        const auto &a = t.waypoints[k - 1];
        const auto &b = t.waypoints[k];
        const double dx = b[0] - a[0], dy = b[1] - a[1];
        const double seg = std::hypot(dx, dy);
        double s = t.spacing - carry;
        while (s <= seg + 1e-9)
        {
            pts.push_back({a[0] + dx * s / seg, a[1] + dy * s / seg, height});
            s += t.spacing;
        }
        carry = seg - (s - t.spacing);
    }
    return pts;
}

// Positions are identified by trajectory and sample index so ids are stable across runs.
inline std::uint32_t make_position_id(std::uint32_t trajectory_id, std::uint32_t index)
{
    return trajectory_id * 100000u + index;
}

namespace detail
{

inline double point_segment_distance(const std::array<double, 2> &p, const std::array<double, 2> &a,
                                     const std::array<double, 2> &b)
{
    const double dx = b[0] - a[0], dy = b[1] - a[1];
    const double l2 = dx * dx + dy * dy;
    double t = l2 > 0.0 ? ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / l2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return std::hypot(p[0] - a[0] - t * dx, p[1] - a[1] - t * dy);
}

inline void check_reflector(const Reflector &r, const std::string &field)
{
    if (!(r.loss_db >= 0.0))
        throw InvalidConfig(field + ".loss_db", "reflection loss must be >= 0 dB");
    if (!(r.half_width > 0.0) || !(r.height > 0.0))
        throw InvalidConfig(field, "facet extent must be positive");
    if (std::abs(r.normal[2]) > 1e-12 || std::abs(length(r.normal) - 1.0) > 1e-9)
        throw InvalidConfig(field + ".normal", "normal must be a horizontal unit vector");
}

} // namespace detail

inline void validate(const ScenarioConfig &c)
{
    if (c.trajectories.empty())
        throw InvalidConfig("trajectories", "at least one trajectory required");
    if (!(c.carrier_frequency > 0.0))
        throw InvalidConfig("carrier_frequency_hz", "must be positive");
    if (!(c.bounds_min[0] < c.bounds_max[0] && c.bounds_min[1] < c.bounds_max[1]))
        throw InvalidConfig("bounds", "empty bounding box");
    for (std::size_t k = 0; k < c.trajectories.size(); ++k)
    {
        const auto &t = c.trajectories[k];
        const std::string f = "trajectories[" + std::to_string(k) + "]";
        if (t.waypoints.size() < 2)
            throw InvalidConfig(f + ".waypoints", "need at least two waypoints");
        if (!(t.spacing > 0.0))
            throw InvalidConfig(f + ".spacing_m", "must be positive");
        for (const auto &w : t.waypoints)
            if (w[0] < c.bounds_min[0] || w[0] > c.bounds_max[0] || w[1] < c.bounds_min[1] || w[1] > c.bounds_max[1])
                throw InvalidConfig(f + ".waypoints", "waypoint outside bounds");
        for (std::size_t s = 1; s < t.waypoints.size(); ++s)
            if (detail::point_segment_distance({c.bs_position[0], c.bs_position[1]}, t.waypoints[s - 1],
                                               t.waypoints[s]) < 0.5)
                throw InvalidConfig("bs_position", "base station lies on trajectory " + std::to_string(t.id));
    }
    for (std::size_t k = 0; k < c.fixed_reflectors.size(); ++k)
        detail::check_reflector(c.fixed_reflectors[k], "fixed_reflectors[" + std::to_string(k) + "]");
    const auto &r = c.random_reflectors;
    if (r.count > 0)
    {
        if (!(r.distance_min > 0.0 && r.distance_min <= r.distance_max))
            throw InvalidConfig("random_reflectors.distance_m");
        if (!(r.half_width_min > 0.0 && r.half_width_min <= r.half_width_max))
            throw InvalidConfig("random_reflectors.half_width_m");
        if (!(r.height > 0.0))
            throw InvalidConfig("random_reflectors.height_m");
        if (!(r.loss_db_min >= 0.0 && r.loss_db_min <= r.loss_db_max))
            throw InvalidConfig("random_reflectors.loss_db", "reflection loss must be >= 0 dB");
    }
}

inline Scenario generate_scenario(const ScenarioConfig &c, std::uint64_t seed)
{
    validate(c);
    Scenario s;
    s.id = c.id;
    s.carrier_frequency = c.carrier_frequency;
    s.bs_position = c.bs_position;
    s.bs_boresight_az = c.bs_boresight_az;
    s.ue_boresight_az = c.ue_boresight_az;
    s.ue_height = c.ue_height;
    s.reference_gain_db = c.reference_gain_db;
    s.bounds_min = c.bounds_min;
    s.bounds_max = c.bounds_max;
    s.trajectories = c.trajectories;
    s.reflectors = c.fixed_reflectors;

    Rng rng = make_rng(seed, {0x5ce7a210});
    const auto &r = c.random_reflectors;
    for (std::size_t k = 0; k < r.count; ++k)
    {
        const double bearing = uniform(rng, -std::numbers::pi, std::numbers::pi);
        const double dist = uniform(rng, r.distance_min, r.distance_max);
        const double jitter = uniform(rng, -1.0, 1.0) * r.normal_jitter_deg * std::numbers::pi / 180.0;
        Reflector f;
        f.center = {dist * std::cos(bearing), dist * std::sin(bearing), 0.5 * r.height};
        f.normal = {-std::cos(bearing + jitter), -std::sin(bearing + jitter), 0.0};
        f.half_width = uniform(rng, r.half_width_min, r.half_width_max);
        f.height = r.height;
        f.loss_db = uniform(rng, r.loss_db_min, r.loss_db_max);
        s.reflectors.push_back(f);
    }
    return s;
}

namespace detail
{

// Azimuth/elevation of direction d, azimuth relative to the array broadside.
inline std::pair<double, double> local_angles(const Vec3 &d, double boresight_az)
{
    const double len = length(d);
    return {wrap_angle(std::atan2(d[1], d[0]) - boresight_az), wrap_angle(std::asin(std::clamp(d[2] / len, -1.0, 1.0)))};
}

inline double free_space_power(double wavelength, double distance, double gain_db)
{
    const double a = wavelength / (4.0 * std::numbers::pi * distance);
    return a * a * std::pow(10.0, gain_db / 10.0);
}

} // namespace detail

// LOS plus every valid single-bounce mirror path. Pure function of (s, ue_position).
inline RaySet rays_at_position(const Scenario &s, const Vec3 &ue, std::uint32_t position_id = 0)
{
    if (ue[0] < s.bounds_min[0] || ue[0] > s.bounds_max[0] || ue[1] < s.bounds_min[1] || ue[1] > s.bounds_max[1])
        throw InvalidArgument("rays_at_position: UE outside scenario bounds");
    const Vec3 &bs = s.bs_position;
    const double lambda = s.wavelength();

    RaySet rs;
    rs.position_id = position_id;
    rs.position = ue;

    {
        const Vec3 d = detail::sub(bs, ue);
        const double dist = detail::length(d);
        if (dist <= 0.0)
            throw InvalidArgument("rays_at_position: UE coincides with BS");
        Ray r;
        std::tie(r.dod_az, r.dod_el) = detail::local_angles(d, s.ue_boresight_az);
        std::tie(r.doa_az, r.doa_el) = detail::local_angles(detail::scale(d, -1.0), s.bs_boresight_az);
        r.delay = dist / kSpeedOfLight;
        r.power = detail::free_space_power(lambda, dist, s.reference_gain_db);
        rs.rays.push_back(r);
    }

    for (const auto &f : s.reflectors)
    {
        const double hb = detail::dot(detail::sub(bs, f.center), f.normal);
        const double hu = detail::dot(detail::sub(ue, f.center), f.normal);
        if (hb <= 0.0 || hu <= 0.0)
            continue; // both ends must face the reflecting side
        const Vec3 ue_img = detail::sub(ue, detail::scale(f.normal, 2.0 * hu));
        const Vec3 bs_img = detail::sub(bs, detail::scale(f.normal, 2.0 * hb));
        // intersection of the BS -> UE-image segment with the facet plane
        const double t = hb / (hb + hu);
        const Vec3 hit = detail::add(bs, detail::scale(detail::sub(ue_img, bs), t));
        const Vec3 tangent{-f.normal[1], f.normal[0], 0.0};
        if (std::abs(detail::dot(detail::sub(hit, f.center), tangent)) > f.half_width)
            continue;
        const double z0 = f.center[2] - 0.5 * f.height;
        if (hit[2] < z0 || hit[2] > z0 + f.height)
            continue;

        const double dist = detail::length(detail::sub(ue_img, bs));
        Ray r;
        std::tie(r.dod_az, r.dod_el) = detail::local_angles(detail::sub(bs_img, ue), s.ue_boresight_az);
        std::tie(r.doa_az, r.doa_el) = detail::local_angles(detail::sub(ue_img, bs), s.bs_boresight_az);
        r.delay = dist / kSpeedOfLight;
        r.power = detail::free_space_power(lambda, dist, s.reference_gain_db) * std::pow(10.0, -f.loss_db / 10.0);
        rs.rays.push_back(r);
    }

    std::stable_sort(rs.rays.begin(), rs.rays.end(), [](const Ray &a, const Ray &b) { return a.delay < b.delay; });
    return rs;
}

// One passage: alpha_p ~ CN(0, Omega_p), independent across paths.
inline CVec sample_passage(const RaySet &rs, Rng &rng)
{
    CVec alphas(rs.rays.size());
    for (std::size_t p = 0; p < rs.rays.size(); ++p)
        alphas[p] = complex_normal(rng, rs.rays[p].power);
    return alphas;
}

// ---- configuration file (JSON) ----

inline ScenarioConfig scenario_config_from_json(const nlohmann::json &j)
{
    auto deg = [](double d) { return d * std::numbers::pi / 180.0; };
    auto get = [&](const nlohmann::json &obj, const char *key, auto def) {
        using T = decltype(def);
        if (!obj.contains(key))
            return def;
        try
        {
            return obj.at(key).template get<T>();
        }
        catch (const nlohmann::json::exception &e)
        {
            throw InvalidConfig(key, e.what());
        }
    };

    ScenarioConfig c;
    if (!j.is_object())
        throw InvalidConfig("<root>", "scenario config must be an object");
    c.id = get(j, "id", c.id);
    c.carrier_frequency = get(j, "carrier_frequency_hz", c.carrier_frequency);
    c.bs_position = get(j, "bs_position", c.bs_position);
    c.bs_boresight_az = deg(get(j, "bs_boresight_az_deg", 45.0));
    c.ue_boresight_az = deg(get(j, "ue_boresight_az_deg", 0.0));
    c.ue_height = get(j, "ue_height_m", c.ue_height);
    c.reference_gain_db = get(j, "reference_gain_db", c.reference_gain_db);
    if (j.contains("bounds"))
    {
        const auto b = get(j, "bounds", std::array<std::array<double, 2>, 2>{});
        c.bounds_min = b[0];
        c.bounds_max = b[1];
    }
    if (!j.contains("trajectories") || !j["trajectories"].is_array())
        throw InvalidConfig("trajectories", "missing or not an array");
    for (const auto &t : j["trajectories"])
    {
        Trajectory tr;
        tr.id = get(t, "id", static_cast<std::uint32_t>(c.trajectories.size()));
        tr.waypoints = get(t, "waypoints", std::vector<std::array<double, 2>>{});
        tr.spacing = get(t, "spacing_m", 1.0);
        c.trajectories.push_back(std::move(tr));
    }
    if (j.contains("fixed_reflectors"))
        for (const auto &f : j["fixed_reflectors"])
        {
            Reflector r;
            r.center = get(f, "center", Vec3{});
            r.normal = get(f, "normal", Vec3{});
            r.half_width = get(f, "half_width_m", 0.0);
            r.height = get(f, "height_m", 0.0);
            r.loss_db = get(f, "loss_db", 0.0);
            c.fixed_reflectors.push_back(r);
        }
    if (j.contains("random_reflectors"))
    {
        const auto &r = j["random_reflectors"];
        auto &s = c.random_reflectors;
        s.count = get(r, "count", std::size_t{0});
        const auto dist = get(r, "distance_m", std::array<double, 2>{s.distance_min, s.distance_max});
        const auto hw = get(r, "half_width_m", std::array<double, 2>{s.half_width_min, s.half_width_max});
        const auto loss = get(r, "loss_db", std::array<double, 2>{s.loss_db_min, s.loss_db_max});
        s.distance_min = dist[0], s.distance_max = dist[1];
        s.half_width_min = hw[0], s.half_width_max = hw[1];
        s.loss_db_min = loss[0], s.loss_db_max = loss[1];
        s.height = get(r, "height_m", s.height);
        s.normal_jitter_deg = get(r, "normal_jitter_deg", s.normal_jitter_deg);
    }
    validate(c);
    return c;
}

inline ScenarioConfig load_scenario_config(const std::string &path)
{
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open scenario config: " + path);
    nlohmann::json j;
    try
    {
        in >> j;
    }
    catch (const nlohmann::json::parse_error &e)
    {
        throw InvalidConfig(path, e.what());
    }
    return scenario_config_from_json(j);
}

// Two crossing roads (x and y axes), two lanes each way, BS at a corner.
inline ScenarioConfig crossroad_template(std::size_t reflectors = 3)
{
    ScenarioConfig c;
    c.id = "crossroad";
    c.trajectories = {
        {0, {{-30.0, -2.0}, {30.0, -2.0}}, 1.0},
        {1, {{30.0, 2.0}, {-30.0, 2.0}}, 1.0},
        {2, {{2.0, -30.0}, {2.0, 30.0}}, 1.0},
        {3, {{-30.0, -2.0}, {-2.0, -2.0}, {-2.0, -30.0}}, 1.0},
    };
    c.random_reflectors.count = reflectors;
    return c;
}

// ---- ray file ----

inline void write_rays(const std::string &path, const std::map<std::uint32_t, RaySet> &sets)
{
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write ray file: " + path);
    out.precision(17);
    out << "position_id,x,y,z,dod_az,dod_el,doa_az,doa_el,delay_s,power_lin\n";
    for (const auto &[id, rs] : sets)
        for (const auto &r : rs.rays)
            out << id << ',' << rs.position[0] << ',' << rs.position[1] << ',' << rs.position[2] << ',' << r.dod_az
                << ',' << r.dod_el << ',' << r.doa_az << ',' << r.doa_el << ',' << r.delay << ',' << r.power << '\n';
    if (!out)
        throw IoError("write failed: " + path);
}

// Rays of one position must be contiguous and share coordinates; a position id that
// reappears later in the file is a duplicate.
inline std::map<std::uint32_t, RaySet> load_rays(const std::string &path,
                                                 double tau_max = std::numeric_limits<double>::infinity())
{
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open ray file: " + path);
    static const std::string header = "position_id,x,y,z,dod_az,dod_el,doa_az,doa_el,delay_s,power_lin";

    std::map<std::uint32_t, RaySet> sets;
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(in, line))
        throw ParseError(1, "empty file");
    ++lineno;
    if (!line.empty() && line.back() == '\r')
        line.pop_back();
    if (line != header)
        throw ParseError(1, "unexpected header");

    bool have_current = false;
    std::uint32_t current = 0;
    while (std::getline(in, line))
    {
        ++lineno;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty())
            continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ','))
            fields.push_back(f);
        if (fields.size() != 10)
            throw ParseError(lineno, "expected 10 fields, got " + std::to_string(fields.size()));

        std::uint32_t id = 0;
        {
            auto [p, ec] = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), id);
            if (ec != std::errc{} || p != fields[0].data() + fields[0].size())
                throw ParseError(lineno, "bad position_id '" + fields[0] + "'");
        }
        double v[9];
        for (int k = 0; k < 9; ++k)
        {
            const std::string &s = fields[k + 1];
            auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v[k]);
            if (ec != std::errc{} || p != s.data() + s.size())
                throw ParseError(lineno, "bad number '" + s + "'");
        }

        if (!have_current || id != current)
        {
            if (sets.contains(id))
                throw InvariantViolation(id, "duplicate position_id (non-contiguous rows)");
            sets[id].position_id = id;
            sets[id].position = {v[0], v[1], v[2]};
            current = id;
            have_current = true;
        }
        RaySet &rs = sets[id];
        if (rs.position != Vec3{v[0], v[1], v[2]})
            throw InvariantViolation(id, "rays of one position disagree on coordinates");
        rs.rays.push_back({v[3], v[4], v[5], v[6], v[7], v[8]});
    }
    for (const auto &[id, rs] : sets)
        rs.validate(tau_max);
    return sets;
}

} // namespace mlr

#endif
