use mbslam::image::ImageBuffer;

/// Direct windowed SSIM with zero padding, one window per pixel.
pub fn naive_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (w, h, nc) = (a.width(), a.height(), a.channels());
    let sigma = 1.5f64;
    let mut k = [[0.0; 11]; 11];
    let mut ksum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            ksum += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for c in 0..nc {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, row) in k.iter().enumerate() {
                    for (j, kv) in row.iter().enumerate() {
                        let (yy_, xx_) = (y + i as isize - 5, x + j as isize - 5);
                        if yy_ < 0 || xx_ < 0 || yy_ >= h as isize || xx_ >= w as isize {
                            continue;
                        }
                        let p = a.get(xx_ as usize, yy_ as usize, c);
                        let q = b.get(xx_ as usize, yy_ as usize, c);
                        let kv = kv / ksum;
                        mx += kv * p;
                        my += kv * q;
                        xx += kv * p * p;
                        yy += kv * q * q;
                        xy += kv * p * q;
                    }
                }
                let (sx, sy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * sxy + c2)
                    / ((mx * mx + my * my + c1) * (sx + sy + c2));
            }
        }
    }
    total / (w * h * nc) as f64
}
