/**
 * Schematic 2D face proxy.
 *
 * Controller vectors vary in length per character, so the mapping is
 * deliberately simple and documented here rather than rig-aware: the vector
 * is split into seven contiguous equal bands whose means (clipped to [0, 1])
 * drive, in order: jaw, mouthOpen, mouthWide, browL, browR, lidL, lidR.
 * An all-zero vector therefore yields the neutral baseline face, and every
 * parameter responds monotonically to its band.
 *
 * Pure geometry only — the SVG lives in ui.ts so these functions stay
 * testable without a DOM.
 */

export interface FaceParams {
  jaw: number;
  mouthOpen: number;
  mouthWide: number;
  browL: number;
  browR: number;
  lidL: number;
  lidR: number;
}

const PARAM_ORDER: Array<keyof FaceParams> = [
  "jaw",
  "mouthOpen",
  "mouthWide",
  "browL",
  "browR",
  "lidL",
  "lidR",
];

function clip01(x: number): number {
  return Math.min(1, Math.max(0, x));
}

export function faceFromControllers(v: number[]): FaceParams {
  const params: FaceParams = {
    jaw: 0,
    mouthOpen: 0,
    mouthWide: 0,
    browL: 0,
    browR: 0,
    lidL: 0,
    lidR: 0,
  };
  const n = v.length;
  if (n === 0) {
    return params;
  }
  for (let band = 0; band < PARAM_ORDER.length; band++) {
    const lo = Math.floor((band * n) / PARAM_ORDER.length);
    const hi = Math.max(lo + 1, Math.floor(((band + 1) * n) / PARAM_ORDER.length));
    let sum = 0;
    let count = 0;
    for (let i = lo; i < Math.min(hi, n); i++) {
      sum += v[i];
      count += 1;
    }
    params[PARAM_ORDER[band]] = count > 0 ? clip01(sum / count) : 0;
  }
  return params;
}

/**
 * Face geometry in a 100x100 viewBox. Each feature is a polyline
 * (array of [x, y] points) ready for an SVG path.
 */
export interface FaceGeometry {
  mouthTop: Array<[number, number]>;
  mouthBottom: Array<[number, number]>;
  browLeft: Array<[number, number]>;
  browRight: Array<[number, number]>;
  eyeLeft: { cx: number; cy: number; rx: number; ry: number };
  eyeRight: { cx: number; cy: number; rx: number; ry: number };
  chinY: number;
}

export function faceGeometry(p: FaceParams): FaceGeometry {
  const mouthY = 68 + p.jaw * 6;
  const halfWidth = 12 + p.mouthWide * 10;
  const gap = p.mouthOpen * 12;
  const curl = p.mouthWide * 4;
  const mouthTop: Array<[number, number]> = [
    [50 - halfWidth, mouthY - curl],
    [50, mouthY - gap / 2],
    [50 + halfWidth, mouthY - curl],
  ];
  const mouthBottom: Array<[number, number]> = [
    [50 - halfWidth, mouthY - curl],
    [50, mouthY + gap / 2 + p.jaw * 4],
    [50 + halfWidth, mouthY - curl],
  ];
  const browLy = 34 - p.browL * 8;
  const browRy = 34 - p.browR * 8;
  const browLeft: Array<[number, number]> = [
    [28, browLy + 2],
    [36, browLy],
    [44, browLy + 2],
  ];
  const browRight: Array<[number, number]> = [
    [56, browRy + 2],
    [64, browRy],
    [72, browRy + 2],
  ];
  // lid value raises the upper lid: 0 = fully open, 1 = closed
  const eyeOpenL = 4.5 * (1 - p.lidL);
  const eyeOpenR = 4.5 * (1 - p.lidR);
  return {
    mouthTop,
    mouthBottom,
    browLeft,
    browRight,
    eyeLeft: { cx: 36, cy: 44, rx: 6, ry: Math.max(0.5, eyeOpenL) },
    eyeRight: { cx: 64, cy: 44, rx: 6, ry: Math.max(0.5, eyeOpenR) },
    chinY: 88 + p.jaw * 5,
  };
}

export function polylinePath(points: Array<[number, number]>): string {
  if (points.length === 0) {
    return "";
  }
  const parts = [`M ${points[0][0]} ${points[0][1]}`];
  for (let i = 1; i < points.length; i++) {
    parts.push(`L ${points[i][0]} ${points[i][1]}`);
  }
  return parts.join(" ");
}
