// HDGE binary container (little-endian):
// magic "HDGE" | version u32=1 | kind u8 | dim u32 | count u32 |
// count * [key_len u16 | key utf-8 | dim * f32] | optional JSON footer.

export const MAGIC = 'HDGE'
export const VERSION = 1

export enum EmbeddingKind {
  TeacherImage = 0,
  StudentFeature = 1,
  TeacherText = 2,
  TeacherScores = 3,
  Checkpoint = 4,
}

export class FormatError extends Error {
  constructor(
    public code: string,
    message: string,
  ) {
    super(`${code}: ${message}`)
  }
}

export interface EmbeddingRow {
  key: string
  values: Float32Array
}

export function encodeTable(
  kind: EmbeddingKind,
  dim: number,
  rows: EmbeddingRow[],
  footer?: unknown,
): Buffer {
  if (!Number.isInteger(dim) || dim <= 0) {
    throw new FormatError('bad_dim', `dim must be a positive integer, got ${dim}`)
  }
  const seen = new Set<string>()
  const parts: Buffer[] = []
  const header = Buffer.alloc(17)
  header.write(MAGIC, 0, 'ascii')
  header.writeUInt32LE(VERSION, 4)
  header.writeUInt8(kind, 8)
  header.writeUInt32LE(dim, 9)
  header.writeUInt32LE(rows.length, 13)
  parts.push(header)
  for (const row of rows) {
    if (seen.has(row.key)) {
      throw new FormatError('duplicate_key', `row key '${row.key}' repeated`)
    }
    seen.add(row.key)
    if (row.values.length !== dim) {
      throw new FormatError(
        'dim_mismatch',
        `row '${row.key}' has ${row.values.length} values, expected ${dim}`,
      )
    }
    for (const v of row.values) {
      if (!Number.isFinite(v)) {
        throw new FormatError('non_finite', `row '${row.key}' contains a non-finite value`)
      }
    }
    const kb = Buffer.from(row.key, 'utf-8')
    if (kb.length > 0xffff) {
      throw new FormatError('key_too_long', `key exceeds 65535 bytes`)
    }
    const len = Buffer.alloc(2)
    len.writeUInt16LE(kb.length, 0)
    const payload = Buffer.alloc(4 * dim)
    for (let i = 0; i < dim; i++) payload.writeFloatLE(row.values[i], 4 * i)
    parts.push(len, kb, payload)
  }
  if (footer !== undefined) {
    parts.push(Buffer.from(JSON.stringify(footer), 'utf-8'))
  }
  return Buffer.concat(parts)
}

export interface DecodedTable {
  kind: EmbeddingKind
  dim: number
  rows: EmbeddingRow[]
  footer: unknown | null
}

// Reader used only by the tests; the authoritative reader lives in the
// Python toolkit and the conformance test round-trips through it.
export function decodeTable(blob: Buffer): DecodedTable {
  if (blob.subarray(0, 4).toString('ascii') !== MAGIC) {
    throw new FormatError('bad_magic', `expected '${MAGIC}'`)
  }
  if (blob.length < 17) throw new FormatError('truncated', 'header incomplete')
  const version = blob.readUInt32LE(4)
  if (version !== VERSION) throw new FormatError('bad_version', `unsupported version ${version}`)
  const kind = blob.readUInt8(8) as EmbeddingKind
  const dim = blob.readUInt32LE(9)
  if (dim === 0) throw new FormatError('bad_dim', 'dim 0 in header')
  const count = blob.readUInt32LE(13)
  let off = 17
  const rows: EmbeddingRow[] = []
  for (let i = 0; i < count; i++) {
    if (off + 2 > blob.length) throw new FormatError('truncated', `record ${i}: missing key length`)
    const klen = blob.readUInt16LE(off)
    off += 2
    if (off + klen + 4 * dim > blob.length) {
      throw new FormatError('truncated', `record ${i}: payload cut short`)
    }
    const key = blob.subarray(off, off + klen).toString('utf-8')
    off += klen
    const values = new Float32Array(dim)
    for (let j = 0; j < dim; j++) values[j] = blob.readFloatLE(off + 4 * j)
    off += 4 * dim
    rows.push({ key, values })
  }
  let footer: unknown | null = null
  if (off < blob.length) {
    footer = JSON.parse(blob.subarray(off).toString('utf-8'))
  }
  return { kind, dim, rows, footer }
}
