#!/usr/bin/env node
// hdg-extract extract --images manifest.json --model mock --out dir/
// Emits teacher_image.hdge, teacher_text.hdge, and warnings.json.

import { mkdir, readFile } from 'fs/promises'
import { EncoderError, loadEncoder } from './encoder.js'
import { JobError, extractImages, extractTexts, jobFromManifest, writeWarnings } from './extract.js'

function parseArgs(argv: string[]): { images: string; model: string; out: string } {
  if (argv[0] !== 'extract') {
    throw new JobError('bad_arguments', `unknown command '${argv[0] ?? ''}', expected 'extract'`)
  }
  const opts: Record<string, string> = {}
  for (let i = 1; i < argv.length; i += 2) {
    const flag = argv[i]
    if (!flag.startsWith('--') || i + 1 >= argv.length) {
      throw new JobError('bad_arguments', `expected --flag value pairs, got '${flag}'`)
    }
    opts[flag.slice(2)] = argv[i + 1]
  }
  const images = opts['images']
  if (!images) throw new JobError('bad_arguments', '--images is required')
  return { images, model: opts['model'] ?? 'mock', out: opts['out'] ?? '.' }
}

export async function main(argv: string[]): Promise<number> {
  try {
    const args = parseArgs(argv)
    const doc = JSON.parse(await readFile(args.images, 'utf-8'))
    const job = jobFromManifest(doc, args.model, args.out)
    const encoder = loadEncoder(args.model)
    await mkdir(args.out, { recursive: true })
    const imgResult = await extractImages(job, encoder)
    const txtResult = await extractTexts(job, encoder)
    await writeWarnings(job, imgResult.skipped)
    console.log(
      `wrote ${imgResult.rows} image rows, ${txtResult.rows} text rows to ${args.out}` +
        (imgResult.skipped.length ? ` (${imgResult.skipped.length} skipped, see warnings.json)` : ''),
    )
    return 0
  } catch (e) {
    if (e instanceof JobError || e instanceof EncoderError) {
      console.error(e.message)
      return 2
    }
    console.error(`io_error: ${(e as Error).message}`)
    return 3
  }
}

if (process.argv[1] && process.argv[1].endsWith('cli.js')) {
  main(process.argv.slice(2)).then((code) => process.exit(code))
}
