import { createHash } from 'crypto'

export class EncoderError extends Error {
  constructor(
    public code: string,
    message: string,
  ) {
    super(`${code}: ${message}`)
  }
}

// An encoder maps raw image bytes or prompt strings to embeddings.
// Real vision-language backends plug in here; the deterministic mock
// below keeps the export pipeline and format contract testable offline.
export interface Encoder {
  readonly model: string
  readonly dim: number
  encodeImage(bytes: Buffer): Promise<Float64Array>
  encodeText(prompt: string): Promise<Float64Array>
}

function hashToUnitVector(seedParts: string[], bytes: Buffer | null, dim: number): Float64Array {
  // expand a sha256 stream into N(0,1)-ish coordinates, then normalize
  const out = new Float64Array(dim)
  let counter = 0
  let i = 0
  while (i < dim) {
    const h = createHash('sha256')
    for (const part of seedParts) h.update(part)
    if (bytes) h.update(bytes)
    h.update(String(counter++))
    const digest = h.digest()
    for (let j = 0; j + 8 <= digest.length && i < dim; j += 8, i++) {
      // Box-Muller on two u32 lanes
      const u1 = (digest.readUInt32LE(j) + 1) / 4294967297
      const u2 = digest.readUInt32LE(j + 4) / 4294967296
      out[i] = Math.sqrt(-2 * Math.log(u1)) * Math.cos(2 * Math.PI * u2)
    }
  }
  let norm = 0
  for (const v of out) norm += v * v
  norm = Math.sqrt(norm)
  for (let i = 0; i < dim; i++) out[i] /= norm
  return out
}

export class MockEncoder implements Encoder {
  constructor(
    public readonly model: string,
    public readonly dim: number,
  ) {}

  async encodeImage(bytes: Buffer): Promise<Float64Array> {
    return hashToUnitVector([this.model, 'image'], bytes, this.dim)
  }

  async encodeText(prompt: string): Promise<Float64Array> {
    return hashToUnitVector([this.model, 'text', prompt], null, this.dim)
  }
}

// model ids: "mock" or "mock:<dim>"; anything else needs a backend that
// is not bundled here, which is a fatal load error by contract
export function loadEncoder(model: string): Encoder {
  if (model === 'mock') return new MockEncoder(model, 512)
  const m = /^mock:(\d+)$/.exec(model)
  if (m) {
    const dim = Number(m[1])
    if (dim < 1) throw new EncoderError('model_load', `bad mock dim ${dim}`)
    return new MockEncoder(model, dim)
  }
  throw new EncoderError('model_load', `no backend available for model '${model}'`)
}
