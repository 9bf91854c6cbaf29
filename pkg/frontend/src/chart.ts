// SVG line chart of the ability estimate against the answered-question
// count. Pure string building so it can be unit-tested without a DOM;
// every plotted number comes straight from the server trajectory.

export type TrajectoryPoint = {
  step: number;
  theta: number;
};

export type ChartOptions = {
  width?: number;
  height?: number;
  pad?: number;
  nMax?: number;
};

export function trajectoryPoints(trajectory: number[]): TrajectoryPoint[] {
  return trajectory.map((theta, i) => ({ step: i + 1, theta }));
}

type Scale = (v: number) => number;

function linearScale(lo: number, hi: number, a: number, b: number): Scale {
  const span = hi - lo;
  if (span === 0) {
    return () => (a + b) / 2;
  }
  return (v) => a + ((v - lo) / span) * (b - a);
}

function fmt(v: number): string {
  return Number.isInteger(v) ? String(v) : v.toFixed(1);
}

/**
 * Render the trajectory as a standalone SVG string. The x axis spans
 * steps 1..nMax (so the chart does not rescale while a test is in
 * progress) and the y axis spans the observed estimates padded by half
 * a unit, with a dashed reference line at zero when it is in range.
 */
export function renderTrajectorySvg(
  trajectory: number[],
  opts: ChartOptions = {}
): string {
  const width = opts.width ?? 420;
  const height = opts.height ?? 180;
  const pad = opts.pad ?? 28;
  const points = trajectoryPoints(trajectory);
  const nMax = Math.max(opts.nMax ?? points.length, points.length, 1);

  const thetas = points.map((p) => p.theta);
  const yLo = (thetas.length ? Math.min(...thetas) : 0) - 0.5;
  const yHi = (thetas.length ? Math.max(...thetas) : 0) + 0.5;
  const sx = linearScale(1, nMax, pad, width - pad);
  const sy = linearScale(yLo, yHi, height - pad, pad);

  const parts: string[] = [];
  parts.push(
    `<svg class="trajectory" viewBox="0 0 ${width} ${height}" ` +
      `width="${width}" height="${height}" role="img" ` +
      `aria-label="ability estimate by step">`
  );
  parts.push(
    `<line class="axis" x1="${pad}" y1="${height - pad}" ` +
      `x2="${width - pad}" y2="${height - pad}"/>`
  );
  parts.push(
    `<line class="axis" x1="${pad}" y1="${pad}" ` +
      `x2="${pad}" y2="${height - pad}"/>`
  );
  if (yLo < 0 && yHi > 0) {
    const y0 = sy(0);
    parts.push(
      `<line class="zero" x1="${pad}" y1="${y0}" ` +
        `x2="${width - pad}" y2="${y0}" stroke-dasharray="4 3"/>`
    );
  }
  for (let step = 1; step <= nMax; step++) {
    parts.push(
      `<text class="tick" x="${sx(step)}" y="${height - pad + 14}" ` +
        `text-anchor="middle">${step}</text>`
    );
  }
  parts.push(
    `<text class="tick" x="${pad - 6}" y="${sy(yHi)}" ` +
      `text-anchor="end">${fmt(yHi)}</text>`
  );
  parts.push(
    `<text class="tick" x="${pad - 6}" y="${sy(yLo)}" ` +
      `text-anchor="end">${fmt(yLo)}</text>`
  );
  if (points.length > 1) {
    const coords = points
      .map((p) => `${sx(p.step)},${sy(p.theta)}`)
      .join(" ");
    parts.push(`<polyline class="path" fill="none" points="${coords}"/>`);
  }
  for (const p of points) {
    parts.push(
      `<circle class="pt" cx="${sx(p.step)}" cy="${sy(p.theta)}" r="3.5">` +
        `<title>step ${p.step}: ${p.theta.toFixed(4)}</title></circle>`
    );
  }
  parts.push("</svg>");
  return parts.join("");
}
