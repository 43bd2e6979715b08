#pragma once

// Minimal SVG emitter for line and scatter plots.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

namespace svlab::harness {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
    std::vector<double> band;  // optional half-width around y (e.g. one std)
};

struct ScatterPoint {
    double x = 0.0;
    double y = 0.0;
    std::size_t group = 0;
};

namespace svg_detail {

inline const char* color(std::size_t i) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    return palette[i % 10];
}

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

inline std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

struct Frame {
    double x0, x1, y0, y1;
    static constexpr double W = 640, H = 420, left = 70, right = 170, top = 40, bottom = 60;

    double px(double x) const { return left + (x - x0) / (x1 - x0) * (W - left - right); }
    double py(double y) const { return H - bottom - (y - y0) / (y1 - y0) * (H - top - bottom); }
};

inline Frame frame_for(double x0, double x1, double y0, double y1) {
    if (!(x1 > x0)) {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if (!(y1 > y0)) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    const double py = 0.05 * (y1 - y0);
    return {x0, x1, y0 - py, y1 + py};
}

inline std::string axes(const Frame& f, const std::string& title, const std::string& xlabel, const std::string& ylabel) {
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" font-family=\"sans-serif\" font-size=\"12\">\n";
    s += "<rect width=\"640\" height=\"420\" fill=\"white\"/>\n";
    s += "<text x=\"320\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" + escape(title) + "</text>\n";
    const double bx = Frame::left, by = Frame::H - Frame::bottom, ex = Frame::W - Frame::right, ey = Frame::top;
    s += "<line x1=\"" + num(bx) + "\" y1=\"" + num(by) + "\" x2=\"" + num(ex) + "\" y2=\"" + num(by) + "\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + num(bx) + "\" y1=\"" + num(by) + "\" x2=\"" + num(bx) + "\" y2=\"" + num(ey) + "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0, yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
        s += "<text x=\"" + num(f.px(xv)) + "\" y=\"" + num(by + 16) + "\" text-anchor=\"middle\">" + num(xv) + "</text>\n";
        s += "<text x=\"" + num(bx - 6) + "\" y=\"" + num(f.py(yv) + 4) + "\" text-anchor=\"end\">" + num(yv) + "</text>\n";
    }
    s += "<text x=\"" + num((bx + ex) / 2) + "\" y=\"" + num(Frame::H - 18) + "\" text-anchor=\"middle\">" + escape(xlabel) + "</text>\n";
    s += "<text x=\"18\" y=\"" + num((by + ey) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " + num((by + ey) / 2) +
         ")\">" + escape(ylabel) + "</text>\n";
    return s;
}

inline std::string legend(const std::vector<std::string>& names) {
    std::string s;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const double y = Frame::top + 10 + 18.0 * static_cast<double>(i);
        const double x = Frame::W - Frame::right + 12;
        s += "<rect x=\"" + num(x) + "\" y=\"" + num(y - 8) + "\" width=\"10\" height=\"10\" fill=\"" + color(i) + "\"/>\n";
        s += "<text x=\"" + num(x + 16) + "\" y=\"" + num(y + 1) + "\">" + escape(names[i]) + "</text>\n";
    }
    return s;
}

}  // namespace svg_detail

inline std::string line_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                             const std::vector<Series>& series) {
    using namespace svg_detail;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            const double b = i < s.band.size() ? s.band[i] : 0.0;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i] - b);
            y1 = std::max(y1, s.y[i] + b);
        }
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    const Frame f = frame_for(x0, x1, y0, y1);
    std::string out = axes(f, title, xlabel, ylabel);
    std::vector<std::string> names;
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        names.push_back(s.name);
        if (!s.band.empty() && s.band.size() == s.x.size() && !s.x.empty()) {
            std::string pts;
            for (std::size_t i = 0; i < s.x.size(); ++i) pts += num(f.px(s.x[i])) + "," + num(f.py(s.y[i] + s.band[i])) + " ";
            for (std::size_t i = s.x.size(); i-- > 0;) pts += num(f.px(s.x[i])) + "," + num(f.py(s.y[i] - s.band[i])) + " ";
            out += "<polygon points=\"" + pts + "\" fill=\"" + color(k) + "\" fill-opacity=\"0.18\" stroke=\"none\"/>\n";
        }
        std::string pts;
        for (std::size_t i = 0; i < s.x.size(); ++i) pts += num(f.px(s.x[i])) + "," + num(f.py(s.y[i])) + " ";
        out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color(k) + "\" stroke-width=\"2\"/>\n";
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            out += "<circle cx=\"" + num(f.px(s.x[i])) + "\" cy=\"" + num(f.py(s.y[i])) + "\" r=\"3\" fill=\"" + color(k) + "\"/>\n";
        }
    }
    out += legend(names);
    out += "</svg>\n";
    return out;
}

inline std::string scatter_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                const std::vector<ScatterPoint>& points, const std::vector<std::string>& group_names) {
    using namespace svg_detail;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& p : points) {
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.y);
        y1 = std::max(y1, p.y);
    }
    if (points.empty()) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    const Frame f = frame_for(x0, x1, y0, y1);
    std::string out = axes(f, title, xlabel, ylabel);
    for (const auto& p : points) {
        out += "<circle cx=\"" + num(f.px(p.x)) + "\" cy=\"" + num(f.py(p.y)) + "\" r=\"2.5\" fill=\"" + color(p.group) +
               "\" fill-opacity=\"0.8\"/>\n";
    }
    out += legend(group_names);
    out += "</svg>\n";
    return out;
}

}  // namespace svlab::harness
