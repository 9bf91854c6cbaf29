import { describe, expect, it } from "vitest";
import { renderTrajectorySvg, trajectoryPoints } from "../src/chart.js";

function count(haystack: string, needle: string): number {
  return haystack.split(needle).length - 1;
}

describe("trajectoryPoints", () => {
  it("numbers steps from one", () => {
    expect(trajectoryPoints([0.2, -0.1])).toEqual([
      { step: 1, theta: 0.2 },
      { step: 2, theta: -0.1 },
    ]);
  });
});

describe("renderTrajectorySvg", () => {
  it("draws one marker per trajectory entry", () => {
    const svg = renderTrajectorySvg([0.1, -0.3, 0.4, 0.2]);
    expect(count(svg, "<circle")).toBe(4);
    expect(count(svg, "<polyline")).toBe(1);
  });

  it("draws ten markers for a full ten-step session", () => {
    const traj = Array.from({ length: 10 }, (_, i) => 0.05 * i - 0.2);
    const svg = renderTrajectorySvg(traj, { nMax: 10 });
    expect(count(svg, "<circle")).toBe(10);
  });

  it("renders an empty frame before the first answer", () => {
    const svg = renderTrajectorySvg([], { nMax: 10 });
    expect(count(svg, "<circle")).toBe(0);
    expect(count(svg, "<polyline")).toBe(0);
    expect(svg).toContain("<svg");
  });

  it("keeps the x axis sized to the full test length", () => {
    const short = renderTrajectorySvg([0.1], { nMax: 10 });
    // one x tick per step plus the two y-range labels
    expect(count(short, 'class="tick"')).toBe(12);
  });

  it("shows the zero reference line only when zero is in range", () => {
    expect(renderTrajectorySvg([-0.5, 0.5])).toContain('class="zero"');
    expect(renderTrajectorySvg([3.0, 3.2])).not.toContain('class="zero"');
  });

  it("handles a flat trajectory without degenerate coordinates", () => {
    const svg = renderTrajectorySvg([0.7, 0.7, 0.7]);
    expect(svg).not.toContain("NaN");
    expect(svg).not.toContain("Infinity");
    expect(count(svg, "<circle")).toBe(3);
  });

  it("places points in server order along the x axis", () => {
    const svg = renderTrajectorySvg([0.0, 1.0], { width: 100, pad: 10 });
    const xs = [...svg.matchAll(/cx="([\d.]+)"/g)].map((m) => Number(m[1]));
    expect(xs.length).toBe(2);
    expect(xs[0]).toBeLessThan(xs[1]);
  });
});
