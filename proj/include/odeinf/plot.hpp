#pragma once

// Static SVG rendering of trajectory overlays and phase portraits from plot-data files.

#include "odeinf/errors.hpp"
#include "odeinf/evaluation.hpp"
#include "odeinf/json_io.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace odeinf::plot {

enum class Style { Solid, Dashed, Points };

inline const char* to_string(Style s) {
    switch (s) {
        case Style::Solid: return "solid";
        case Style::Dashed: return "dashed";
        case Style::Points: return "points";
    }
    return "solid";
}

inline Style style_from(const std::string& s, const std::string& path) {
    if (s == "solid") return Style::Solid;
    if (s == "dashed") return Style::Dashed;
    if (s == "points") return Style::Points;
    throw ConfigError(path, path + ": unknown style '" + s + "'");
}

struct Series {
    std::string label;
    Style style = Style::Solid;
    std::vector<double> t;
    Eigen::MatrixXd x; // rows = points
};

struct PlotSpec {
    std::string title;
    std::vector<Series> series;

    int dimension() const { return series.empty() ? 0 : static_cast<int>(series.front().x.cols()); }
};

inline Json to_json(const PlotSpec& p) {
    Json series = Json::array();
    for (const auto& s : p.series) {
        Json rows = Json::array();
        for (Eigen::Index i = 0; i < s.x.rows(); ++i) {
            Json r = Json::array();
            for (Eigen::Index k = 0; k < s.x.cols(); ++k) r.push_back(s.x(i, k));
            rows.push_back(r);
        }
        series.push_back(Json{{"label", s.label}, {"style", to_string(s.style)}, {"t", s.t}, {"x", rows}});
    }
    return Json{{"title", p.title}, {"series", series}};
}

inline PlotSpec plot_from_json(const Json& j, const std::string& path) {
    JsonReader r(j, path);
    PlotSpec p;
    Json series;
    r.get("title", p.title);
    r.get("series", series);
    r.finish();
    if (!series.is_array()) r.fail("series", "array expected");
    for (const auto& sj : series) {
        JsonReader sr(sj, r.key_name("series"));
        Series s;
        std::string style = "solid";
        std::vector<std::vector<double>> rows;
        sr.get("label", s.label);
        sr.get("style", style);
        sr.get("t", s.t);
        sr.get("x", rows);
        sr.finish();
        s.style = style_from(style, sr.key_name("style"));
        if (rows.size() != s.t.size()) sr.fail("x", "needs one row per time point");
        const std::size_t d = rows.empty() ? 0 : rows.front().size();
        s.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != d) sr.fail("x", "rows must share one width");
            for (std::size_t k = 0; k < d; ++k) s.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
        }
        if (!p.series.empty() && s.x.cols() != p.series.front().x.cols()) sr.fail("x", "all series of a plot must share one dimension");
        p.series.push_back(std::move(s));
    }
    return p;
}

/// Plot data of one evaluation trace: context points, reference and inferred paths.
inline PlotSpec trace_plot(const std::string& title, const TaskTrace& tr) {
    PlotSpec p;
    p.title = title;
    for (const auto& c : tr.context) p.series.push_back({"context", Style::Points, c.times, c.values});
    p.series.push_back({"reference", Style::Solid, tr.times, tr.reference});
    if (tr.predicted.rows() > 0) p.series.push_back({"inferred", Style::Dashed, tr.times, tr.predicted});
    return p;
}

namespace detail {

inline const char* colour(std::size_t i) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};
    return palette[i % 6];
}

struct Range {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();

    void add(double v) {
        if (!std::isfinite(v)) return;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }

    void finish() {
        if (!(lo <= hi)) lo = 0.0, hi = 1.0;
        if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
    }
};

class Canvas {
public:
    static constexpr double W = 640, H = 420, L = 70, R = 150, T = 40, B = 50;

    Canvas(const std::string& title, const std::string& xlabel, const std::string& ylabel, Range x, Range y) : x_(x), y_(y) {
        os_ << std::setprecision(6);
        os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
        os_ << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
        os_ << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" << escape(title) << "</text>\n";
        os_ << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
            << "\" fill=\"none\" stroke=\"black\"/>\n";
        for (int i = 0; i <= 4; ++i) {
            const double fx = x_.lo + (x_.hi - x_.lo) * i / 4.0, fy = y_.lo + (y_.hi - y_.lo) * i / 4.0;
            os_ << "<text x=\"" << px(fx) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
                << fmt(fx) << "</text>\n";
            os_ << "<text x=\"" << L - 6 << "\" y=\"" << py(fy) + 3 << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << fmt(fy)
                << "</text>\n";
        }
        os_ << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
            << escape(xlabel) << "</text>\n";
        os_ << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 "
            << (T + H - B) / 2 << ")\">" << escape(ylabel) << "</text>\n";
    }

    void path(const std::vector<double>& xs, const std::vector<double>& ys, Style style, const char* colour) {
        if (style == Style::Points) {
            for (std::size_t i = 0; i < xs.size(); ++i)
                if (std::isfinite(xs[i]) && std::isfinite(ys[i]))
                    os_ << "<circle cx=\"" << px(xs[i]) << "\" cy=\"" << py(ys[i]) << "\" r=\"2.2\" fill=\"" << colour << "\" fill-opacity=\"0.6\"/>\n";
            return;
        }
        os_ << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.6\"";
        if (style == Style::Dashed) os_ << " stroke-dasharray=\"6 4\"";
        os_ << " points=\"";
        for (std::size_t i = 0; i < xs.size(); ++i)
            if (std::isfinite(xs[i]) && std::isfinite(ys[i])) os_ << px(xs[i]) << "," << py(ys[i]) << " ";
        os_ << "\"/>\n";
    }

    void legend(const std::string& label, Style style, const char* colour) {
        const double y = T + 12 + 16 * static_cast<double>(legend_++);
        const double x = W - R + 10;
        if (style == Style::Points) {
            os_ << "<circle cx=\"" << x + 10 << "\" cy=\"" << y - 4 << "\" r=\"3\" fill=\"" << colour << "\"/>\n";
        } else {
            os_ << "<line x1=\"" << x << "\" y1=\"" << y - 4 << "\" x2=\"" << x + 20 << "\" y2=\"" << y - 4 << "\" stroke=\"" << colour
                << "\" stroke-width=\"1.6\"" << (style == Style::Dashed ? " stroke-dasharray=\"6 4\"" : "") << "/>\n";
        }
        os_ << "<text x=\"" << x + 26 << "\" y=\"" << y << "\" font-family=\"sans-serif\" font-size=\"11\">" << escape(label) << "</text>\n";
    }

    std::string finish() {
        os_ << "</svg>\n";
        return os_.str();
    }

private:
    double px(double v) const { return L + (v - x_.lo) / (x_.hi - x_.lo) * (W - L - R); }
    double py(double v) const { return H - B - (v - y_.lo) / (y_.hi - y_.lo) * (H - T - B); }

    static std::string fmt(double v) {
        std::ostringstream o;
        o << std::setprecision(3) << v;
        return o.str();
    }

    static std::string escape(const std::string& s) {
        std::string o;
        for (char c : s) {
            if (c == '<') o += "&lt;";
            else if (c == '>') o += "&gt;";
            else if (c == '&') o += "&amp;";
            else if (c == '"') o += "&quot;";
            else o += c;
        }
        return o;
    }

    Range x_, y_;
    std::ostringstream os_;
    int legend_ = 0;
};

} // namespace detail

/// Every coordinate against time; colour per dimension, line style per series.
inline std::string render_trajectories(const PlotSpec& p) {
    ODEINF_REQUIRE(!p.series.empty(), "render_trajectories: plot has no series");
    detail::Range xr, yr;
    for (const auto& s : p.series) {
        for (double t : s.t) xr.add(t);
        for (Eigen::Index i = 0; i < s.x.size(); ++i) yr.add(s.x.data()[i]);
    }
    xr.finish();
    yr.finish();
    detail::Canvas c(p.title, "t", "x", xr, yr);
    for (const auto& s : p.series) {
        for (Eigen::Index k = 0; k < s.x.cols(); ++k) {
            std::vector<double> ys(s.x.rows());
            for (Eigen::Index i = 0; i < s.x.rows(); ++i) ys[static_cast<std::size_t>(i)] = s.x(i, k);
            c.path(s.t, ys, s.style, detail::colour(static_cast<std::size_t>(k)));
        }
    }
    for (const auto& s : p.series)
        for (Eigen::Index k = 0; k < s.x.cols(); ++k) c.legend(s.label + " x" + std::to_string(k + 1), s.style, detail::colour(static_cast<std::size_t>(k)));
    return c.finish();
}

/// x1 against x2; requires at least two dimensions.
inline std::string render_phase_portrait(const PlotSpec& p) {
    ODEINF_REQUIRE(p.dimension() >= 2, "render_phase_portrait: needs at least two dimensions");
    detail::Range xr, yr;
    for (const auto& s : p.series)
        for (Eigen::Index i = 0; i < s.x.rows(); ++i) xr.add(s.x(i, 0)), yr.add(s.x(i, 1));
    xr.finish();
    yr.finish();
    detail::Canvas c(p.title + " (phase portrait)", "x1", "x2", xr, yr);
    std::size_t i = 0;
    for (const auto& s : p.series) {
        std::vector<double> xs(s.x.rows()), ys(s.x.rows());
        for (Eigen::Index r = 0; r < s.x.rows(); ++r) xs[static_cast<std::size_t>(r)] = s.x(r, 0), ys[static_cast<std::size_t>(r)] = s.x(r, 1);
        c.path(xs, ys, s.style, detail::colour(i));
        c.legend(s.label, s.style, detail::colour(i));
        ++i;
    }
    return c.finish();
}

/// Long-format CSV: series, t, x1..xd.
inline std::string plot_csv(const PlotSpec& p) {
    std::ostringstream os;
    os << "series,t";
    for (int k = 0; k < p.dimension(); ++k) os << ",x" << k + 1;
    os << "\n" << std::setprecision(17);
    for (const auto& s : p.series)
        for (Eigen::Index i = 0; i < s.x.rows(); ++i) {
            os << s.label << "," << s.t[static_cast<std::size_t>(i)];
            for (Eigen::Index k = 0; k < s.x.cols(); ++k) os << "," << s.x(i, k);
            os << "\n";
        }
    return os.str();
}

} // namespace odeinf::plot
